use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use ctxfer_core::density::{grid_labels, DensityField, KernelMode};
use ctxfer_core::neural::{Graph, NetworkSpec};
use ctxfer_core::synth::{generate, SynthConfig};
use ctxfer_core::training::{AblationVariant, Model, SceneData};
use ctxfer_core::transfer_physical::SceneImage;
use ctxfer_core::transfer_social::{energy_from_sources, EnergySources, SocialParams, DEFAULT_LAMBDA};
use ctxfer_core::{GridSpec, PixelPoint, SceneGeometry};

fn bundle() -> (SceneData, SceneImage) {
    let synth = generate(&SynthConfig {
        scenes: 1,
        ..Default::default()
    })
    .unwrap()
    .remove(0);
    let scene = synth.to_scene().unwrap();
    let image = SceneImage::from_gray(&synth.image);
    let grid = GridSpec::with_extent(image.width as f64, image.height as f64).unwrap();
    let input = NetworkSpec::default().transfer.input_size;
    (
        SceneData::from_scene(&scene, grid, Some(&image), input, None, None),
        image,
    )
}

fn kde(c: &mut Criterion) {
    let points: Vec<PixelPoint> = (0..200)
        .map(|i| PixelPoint::new(20.0 + (i * 37 % 160) as f64, 20.0 + (i * 53 % 160) as f64))
        .collect();
    let spec = GridSpec::with_extent(200.0, 200.0).unwrap();
    let mut group = c.benchmark_group("kde_grid_labels");
    for (name, h, mode) in [
        ("literal_h7", 7.0, KernelMode::Literal),
        ("normalized_h7", 7.0, KernelMode::Normalized),
    ] {
        let field = DensityField::new(points.clone(), h, mode).unwrap();
        group.bench_function(name, |b| b.iter(|| grid_labels(black_box(&field), &spec, 4).unwrap()));
    }
    group.finish();
}

fn energy(c: &mut Criterion) {
    let (scene, _) = bundle();
    let geometry: &SceneGeometry = &scene.geometry;
    let sample = scene.samples.iter().max_by_key(|s| s.neighbors.len()).unwrap();
    let sources = EnergySources::for_sample(sample, geometry).unwrap();
    let params = SocialParams::new([2.0; 3], DEFAULT_LAMBDA);
    c.bench_function("energy_map_100x100", |b| {
        b.iter(|| energy_from_sources(black_box(&sources), &params, 100, 100))
    });
}

fn networks(c: &mut Criterion) {
    let (scene, _) = bundle();
    let model = Model::new(NetworkSpec::default(), AblationVariant::Full, DEFAULT_LAMBDA);
    let store = model.init_params(1, 2.0);
    let image = scene.image.clone().unwrap();
    let contexts = model.scene_contexts(&store, &scene, None).unwrap();
    let context = &contexts[0].values;
    let sample = &scene.samples[0];

    c.bench_function("transfer_forward", |b| {
        b.iter(|| model.transfer.predict_grid(&store, black_box(&image)).unwrap())
    });
    c.bench_function("predictor_forward", |b| {
        b.iter(|| model.predict_sample(&store, black_box(context), sample).unwrap())
    });
    c.bench_function("predictor_forward_backward", |b| {
        b.iter(|| {
            let mut g = Graph::new();
            let ctx = g.constant(vec![context.rows(), context.cols()], context.data().to_vec());
            let y = model.predictor.predict(&mut g, &store, ctx, &sample.observed).unwrap();
            let loss = g.sq_sum(y);
            g.backward_scalar(loss).unwrap()
        })
    });
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(10);
    targets = kde, energy, networks
}
criterion_main!(benches);
