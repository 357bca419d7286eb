//! Central finite-difference checks for every differentiable op, the
//! network blocks and the composed training loss. Shared by the gradient
//! tests and the acceptance suite.

use ctxfer_core::datasets::{TrajectorySample, OBS_LEN};
use ctxfer_core::density::{scene_labels, KernelMode};
use ctxfer_core::neural::{layers, Graph, NetworkSpec, ParamStore, Predictor, TransferSpec, Var};
use ctxfer_core::synth::{generate, SynthConfig};
use ctxfer_core::training::{
    ccl_node, project_node, AblationVariant, BandwidthRouting, Model, SampleRef, SceneData, TrainConfig, Trainer,
};
use ctxfer_core::transfer_physical::{SceneImage, TransferModel};
use ctxfer_core::transfer_social::{energy_node, EnergySources, DEFAULT_LAMBDA, LOG_H_PARAM};
use ctxfer_core::{GridSpec, Homography, RealPoint, SceneGeometry};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const STEP: f64 = 1e-4;
const TOL: f64 = 1e-4;
const KINK_TOL: f64 = 1e-3;

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-4)
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn uniform(r: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| r.gen_range(lo..hi)).collect()
}

struct Leaf {
    shape: Vec<usize>,
    value: Vec<f64>,
}

fn leaf(shape: &[usize], value: Vec<f64>) -> Leaf {
    Leaf {
        shape: shape.to_vec(),
        value,
    }
}

/// Projects the op output onto a fixed random direction and compares the
/// gradient of that scalar against central differences for every input
/// element.
fn check_op(name: &str, inputs: Vec<Leaf>, tol: f64, build: impl Fn(&mut Graph, &[Var]) -> Var) {
    let eval = |values: &[Vec<f64>]| -> (Graph, Vec<Var>, Var) {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs
            .iter()
            .zip(values)
            .map(|(l, v)| g.leaf(l.shape.clone(), v.clone(), true))
            .collect();
        let y = build(&mut g, &vars);
        (g, vars, y)
    };
    let base: Vec<Vec<f64>> = inputs.iter().map(|l| l.value.clone()).collect();
    let (g, vars, y) = eval(&base);
    let dir = uniform(&mut rng(99), g.len_of(y), -1.0, 1.0);
    let grads = g.backward(&[(y, dir.clone())], None).unwrap();
    let project = |values: &[Vec<f64>]| {
        let (g, _, y) = eval(values);
        g.value(y).iter().zip(&dir).map(|(a, b)| a * b).sum::<f64>()
    };
    for (k, v) in vars.iter().enumerate() {
        let analytic = grads.get_or_zero(&g, *v);
        for i in 0..base[k].len() {
            let mut plus = base.clone();
            plus[k][i] += STEP;
            let mut minus = base.clone();
            minus[k][i] -= STEP;
            let numeric = (project(&plus) - project(&minus)) / (2.0 * STEP);
            let e = rel_err(analytic[i], numeric);
            assert!(
                e < tol,
                "{name}: input {k}[{i}] analytic {} numeric {numeric} rel err {e}",
                analytic[i]
            );
        }
    }
}

/// Same check for parameters held in a store; `per_tensor` random entries
/// of every listed tensor are perturbed.
fn check_params(
    name: &str,
    store: &ParamStore,
    per_tensor: usize,
    tol: f64,
    build: impl Fn(&mut Graph, &ParamStore) -> Var,
) {
    let mut g = Graph::new();
    let y = build(&mut g, store);
    let dir = uniform(&mut rng(7), g.len_of(y), -1.0, 1.0);
    let grads = g.backward(&[(y, dir.clone())], None).unwrap();
    let project = |s: &ParamStore| {
        let mut g = Graph::new();
        let y = build(&mut g, s);
        g.value(y).iter().zip(&dir).map(|(a, b)| a * b).sum::<f64>()
    };
    let mut r = rng(5);
    let mut checked = 0;
    for (pname, var) in g.params().to_vec() {
        let analytic = grads.get_or_zero(&g, var);
        let len = analytic.len();
        for _ in 0..per_tensor.min(len) {
            let i = r.gen_range(0..len);
            let mut plus = store.clone();
            plus.get_mut(&pname).unwrap().data[i] += STEP;
            let mut minus = store.clone();
            minus.get_mut(&pname).unwrap().data[i] -= STEP;
            let numeric = (project(&plus) - project(&minus)) / (2.0 * STEP);
            let e = rel_err(analytic[i], numeric);
            assert!(
                e < tol,
                "{name}: {pname}[{i}] analytic {} numeric {numeric} rel err {e}",
                analytic[i]
            );
            checked += 1;
        }
    }
    assert!(checked > 0, "{name}: no parameters reached");
}

pub fn elementwise_ops() {
    let mut r = rng(1);
    // keep relu inputs away from zero
    let away: Vec<f64> = uniform(&mut r, 6, 0.1, 1.5)
        .into_iter()
        .enumerate()
        .map(|(i, v)| if i % 2 == 0 { v } else { -v })
        .collect();
    check_op("relu", vec![leaf(&[6], away)], TOL, |g, v| g.relu(v[0]));
    let x = uniform(&mut r, 6, -2.0, 2.0);
    check_op("tanh", vec![leaf(&[6], x.clone())], TOL, |g, v| g.tanh(v[0]));
    check_op("sigmoid", vec![leaf(&[6], x.clone())], TOL, |g, v| g.sigmoid(v[0]));
    check_op("softplus", vec![leaf(&[6], x.clone())], TOL, |g, v| g.softplus(v[0]));
    check_op("exp", vec![leaf(&[6], x.clone())], TOL, |g, v| g.exp(v[0]));
    check_op("scale", vec![leaf(&[6], x.clone())], TOL, |g, v| g.scale(v[0], -1.7));
    check_op("add_scalar", vec![leaf(&[6], x.clone())], TOL, |g, v| {
        g.add_scalar(v[0], 0.3)
    });
    let y = uniform(&mut r, 6, -2.0, 2.0);
    let two = || vec![leaf(&[6], x.clone()), leaf(&[6], y.clone())];
    check_op("add", two(), TOL, |g, v| g.add(v[0], v[1]));
    check_op("sub", two(), TOL, |g, v| g.sub(v[0], v[1]));
    check_op("mul", two(), TOL, |g, v| g.mul(v[0], v[1]));
}

pub fn detach_blocks_gradient() {
    let mut g = Graph::new();
    let a = g.leaf(vec![2], vec![1.5, -2.0], true);
    let b = g.leaf(vec![2], vec![0.5, 3.0], true);
    let d = g.detach(b);
    let m = g.mul(a, d);
    let s = g.sum(m);
    let grads = g.backward_scalar(s).unwrap();
    assert_eq!(grads.get_or_zero(&g, a), vec![0.5, 3.0]);
    assert_eq!(grads.get_or_zero(&g, b), vec![0.0, 0.0]);
}

pub fn structural_and_reduction_ops() {
    let mut r = rng(2);
    let x = uniform(&mut r, 6, -2.0, 2.0);
    let y = uniform(&mut r, 4, -2.0, 2.0);
    check_op("reshape", vec![leaf(&[6], x.clone())], TOL, |g, v| {
        g.reshape(v[0], vec![2, 3])
    });
    check_op(
        "concat",
        vec![leaf(&[6], x.clone()), leaf(&[4], y.clone())],
        TOL,
        |g, v| g.concat(&[v[0], v[1]]),
    );
    check_op("slice", vec![leaf(&[6], x.clone())], TOL, |g, v| g.slice(v[0], 2, 3));
    check_op("sum", vec![leaf(&[6], x.clone())], TOL, |g, v| g.sum(v[0]));
    check_op("sq_sum", vec![leaf(&[6], x.clone())], TOL, |g, v| g.sq_sum(v[0]));
    let z = uniform(&mut r, 6, -2.0, 2.0);
    check_op(
        "sq_diff_sum",
        vec![leaf(&[6], x.clone()), leaf(&[6], z)],
        TOL,
        |g, v| g.sq_diff_sum(v[0], v[1]),
    );
    check_op(
        "weighted_sum",
        vec![leaf(&[1], vec![0.4]), leaf(&[1], vec![-1.3])],
        TOL,
        |g, v| g.weighted_sum(&[(v[0], 0.3), (v[1], 2.5)]),
    );
    // distinct values, so the extremum does not switch under perturbation
    let distinct = vec![0.5, -1.2, 2.0, 0.1, -0.4, 1.1];
    check_op(
        "min_all",
        vec![leaf(&[3], distinct[..3].to_vec()), leaf(&[3], distinct[3..].to_vec())],
        KINK_TOL,
        |g, v| g.min_all(&[v[0], v[1]]),
    );
    check_op(
        "max_all",
        vec![leaf(&[3], distinct[..3].to_vec()), leaf(&[3], distinct[3..].to_vec())],
        KINK_TOL,
        |g, v| g.max_all(&[v[0], v[1]]),
    );
    check_op(
        "normalize",
        vec![leaf(&[6], x.clone()), leaf(&[1], vec![-2.5]), leaf(&[1], vec![3.0])],
        TOL,
        |g, v| g.normalize(v[0], v[1], v[2]),
    );
}

pub fn linear_and_convolution_ops() {
    let mut r = rng(3);
    check_op(
        "linear",
        vec![
            leaf(&[4], uniform(&mut r, 4, -1.0, 1.0)),
            leaf(&[3, 4], uniform(&mut r, 12, -1.0, 1.0)),
            leaf(&[3], uniform(&mut r, 3, -1.0, 1.0)),
        ],
        TOL,
        |g, v| g.linear(v[0], v[1], v[2]),
    );
    for (stride, pad) in [(1, 0), (2, 1), (1, 1)] {
        check_op(
            &format!("conv2d stride {stride} pad {pad}"),
            vec![
                leaf(&[2, 6, 5], uniform(&mut r, 60, -1.0, 1.0)),
                leaf(&[3, 2, 3, 3], uniform(&mut r, 54, -1.0, 1.0)),
                leaf(&[3], uniform(&mut r, 3, -1.0, 1.0)),
            ],
            TOL,
            |g, v| g.conv2d(v[0], v[1], v[2], stride, pad),
        );
    }
    check_op(
        "conv_transpose2d",
        vec![
            leaf(&[2, 3, 4], uniform(&mut r, 24, -1.0, 1.0)),
            leaf(&[2, 3, 2, 2], uniform(&mut r, 24, -1.0, 1.0)),
            leaf(&[3], uniform(&mut r, 3, -1.0, 1.0)),
        ],
        TOL,
        |g, v| g.conv_transpose2d(v[0], v[1], v[2], 2, 0),
    );
    check_op(
        "avg_pool2d",
        vec![leaf(&[2, 7, 6], uniform(&mut r, 84, -1.0, 1.0))],
        TOL,
        |g, v| g.avg_pool2d(v[0], 3),
    );
}

pub fn bilinear_sampling() {
    let mut r = rng(4);
    let grid = uniform(&mut r, 20, -1.0, 1.0);
    // fractional coordinates well inside cells, plus one clamped point
    let coords = vec![0.3, 0.6, 2.7, 1.2, 3.45, 2.55, 1.5, 3.3];
    check_op(
        "bilinear_sample",
        vec![leaf(&[4, 5], grid.clone()), leaf(&[4, 2], coords)],
        KINK_TOL,
        |g, v| g.bilinear_sample(v[0], v[1]),
    );
    check_op("bilinear_sample grid only", vec![leaf(&[4, 5], grid)], TOL, |g, v| {
        let c = g.constant(vec![2, 2], vec![-3.0, 1.2, 5.6, 9.0]);
        g.bilinear_sample(v[0], c)
    });
}

fn line(start: (f64, f64), step: (f64, f64)) -> [RealPoint; OBS_LEN] {
    std::array::from_fn(|i| RealPoint::new(start.0 + step.0 * i as f64, start.1 + step.1 * i as f64))
}

fn sample(id: &str, start: (f64, f64), step: (f64, f64)) -> TrajectorySample {
    let obs = line(start, step);
    let last = obs[OBS_LEN - 1];
    TrajectorySample {
        id: id.parse().unwrap(),
        observed: obs,
        future: std::array::from_fn(|i| {
            RealPoint::new(last.x + step.0 * (i + 1) as f64, last.y + step.1 * (i + 1) as f64)
        }),
        neighbors: Vec::new(),
    }
}

pub fn energy_map_log_bandwidths() {
    let geometry = SceneGeometry::new(Homography::identity(), GridSpec::new(16, 16, 16.0, 16.0).unwrap());
    let mut s = sample("a:1@0", (1.2, 3.1), (0.9, 0.4));
    let other = sample("a:2@0", (14.0, 2.0), (-0.7, 0.5));
    s.neighbors.push(ctxfer_core::datasets::Neighbor {
        agent_id: 2,
        observed: other.observed,
    });
    let sources = EnergySources::for_sample(&s, &geometry).unwrap();
    // integer cell distances never equal these bandwidths, so no cell
    // sits on a kernel edge
    let log_h = vec![1.7f64.ln(), 2.3f64.ln(), 1.3f64.ln()];
    check_op("energy_node", vec![leaf(&[3], log_h)], KINK_TOL, |g, v| {
        energy_node(g, v[0], &sources, DEFAULT_LAMBDA, 16, 16)
    });
}

pub fn projection_and_context_loss() {
    let h = Homography::new([[9.0, 0.5, 3.0], [-0.4, 8.0, 2.0], [0.001, 0.002, 1.0]]).unwrap();
    let geometry = SceneGeometry::new(h, GridSpec::new(12, 12, 120.0, 120.0).unwrap());
    let pts = vec![2.13, 3.37, 5.61, 4.22, 7.04, 9.13, 10.52, 6.47];
    check_op("project_node", vec![leaf(&[4, 2], pts.clone())], TOL, |g, v| {
        project_node(g, v[0], &geometry).unwrap()
    });
    let context = uniform(&mut rng(8), 144, 0.0, 2.0);
    check_op(
        "ccl_node",
        vec![leaf(&[4, 2], pts), leaf(&[12, 12], context)],
        KINK_TOL,
        |g, v| ccl_node(g, v[0], v[1], &geometry).unwrap(),
    );
}

pub fn lstm_cell() {
    let mut r = rng(9);
    let mut store = ParamStore::new();
    layers::init_lstm(&mut store, "cell", 3, 4, &mut r);
    store.get_mut("cell.b").unwrap().data = uniform(&mut r, 16, -0.5, 0.5);
    let x = uniform(&mut r, 3, -1.0, 1.0);
    let h = uniform(&mut r, 4, -0.5, 0.5);
    let c = uniform(&mut r, 4, -0.5, 0.5);
    check_params("lstm weights", &store, 16, TOL, |g, s| {
        let xv = g.constant(vec![3], x.clone());
        let hv = g.constant(vec![4], h.clone());
        let cv = g.constant(vec![4], c.clone());
        let (h1, c1) = layers::lstm_step(g, s, "cell", xv, hv, cv).unwrap();
        g.concat(&[h1, c1])
    });
    check_op(
        "lstm state",
        vec![leaf(&[3], x.clone()), leaf(&[4], h.clone()), leaf(&[4], c.clone())],
        TOL,
        |g, v| {
            let (h1, c1) = layers::lstm_step(g, &store, "cell", v[0], v[1], v[2]).unwrap();
            g.concat(&[h1, c1])
        },
    );
}

pub fn predictor_end_to_end() {
    let spec = NetworkSpec::tiny();
    let predictor = Predictor::new(spec.clone());
    let mut store = ParamStore::new();
    predictor.init_params(&mut store, &mut rng(10));
    let observed = line((2.0, 3.0), (0.45, -0.2));
    let context = uniform(&mut rng(11), 144, 0.0, 2.0);
    check_params("predictor", &store, 4, KINK_TOL, |g, s| {
        let c = g.constant(vec![12, 12], context.clone());
        predictor.predict(g, s, c, &observed).unwrap()
    });
    check_op(
        "predictor context input",
        vec![leaf(&[12, 12], context.clone())],
        KINK_TOL,
        |g, v| predictor.predict(g, &store, v[0], &observed).unwrap(),
    );
}

pub fn transfer_model_end_to_end() {
    let model = TransferModel::new(TransferSpec {
        input_size: 24,
        channels: [3, 4, 4],
        up_channels: [4, 3],
    });
    let mut store = ParamStore::new();
    model.init_params(&mut store, &mut rng(12));
    let px = uniform(&mut rng(13), 24 * 24, 0.0, 1.0);
    let image = SceneImage::new(24, 24, 1, px).unwrap();
    check_params("transfer", &store, 4, KINK_TOL, |g, s| {
        let x = model.input_node(g, &image).unwrap();
        model.forward(g, s, x).unwrap()
    });
}

/// Two small synthetic scenes on the tiny grid, with labels.
fn tiny_scenes() -> Vec<SceneData> {
    let cfg = SynthConfig {
        scenes: 2,
        steps: 40,
        walkers: 2,
        groups: 1,
        crossers: 1,
        turners: 1,
        vehicles: 0,
        ..SynthConfig::default()
    };
    let spec = NetworkSpec::tiny();
    let grid = GridSpec::new(12, 12, 200.0, 200.0).unwrap();
    generate(&cfg)
        .unwrap()
        .into_iter()
        .map(|s| {
            let scene = s.to_scene().unwrap();
            let geometry = SceneGeometry::new(s.homography, grid);
            let labels = scene_labels(&scene, &geometry, 7.0, KernelMode::Literal, 2)
                .unwrap()
                .into_grid();
            let pixels = s.image.pixels().map(|p| p.0[0] as f64 / 255.0).collect();
            let image = SceneImage::new(s.image.width() as usize, s.image.height() as usize, 1, pixels).unwrap();
            let mut data = SceneData::from_scene(
                &scene,
                grid,
                Some(&image),
                spec.transfer.input_size,
                Some(labels),
                Some(4.0),
            );
            data.samples.truncate(3);
            data
        })
        .collect()
}

fn batch(scenes: &[SceneData]) -> Vec<SampleRef> {
    scenes
        .iter()
        .enumerate()
        .flat_map(|(si, s)| (0..s.samples.len()).map(move |i| SampleRef { scene: si, sample: i }))
        .collect()
}

pub fn full_loss_matches_finite_differences() {
    let scenes = tiny_scenes();
    assert!(scenes.iter().all(|s| !s.samples.is_empty()));
    let model = Model::new(NetworkSpec::tiny(), AblationVariant::Full, DEFAULT_LAMBDA);
    let cfg = TrainConfig {
        bandwidth_routing: BandwidthRouting::AdlAndCcl,
        ..TrainConfig::default()
    };
    // bandwidths that are not integer cell distances
    let mut store = model.init_params(21, 1.7);
    store.get_mut(LOG_H_PARAM).unwrap().data = vec![1.7f64.ln(), 2.3f64.ln(), 1.3f64.ln()];
    let trainer = Trainer::new(&model, &scenes, &cfg).unwrap();
    let refs = batch(&scenes);
    let mut with_grads = store.clone();
    with_grads.zero_grads();
    trainer.loss_and_grads(&mut with_grads, &refs).unwrap();
    let total = |s: &ParamStore| trainer.loss(s, &refs).unwrap().total;
    let mut r = rng(22);
    let names: Vec<String> = store.names().map(str::to_owned).collect();
    let mut reached = 0;
    for name in &names {
        let Some(analytic) = with_grads.grad(name).map(<[f64]>::to_vec) else {
            continue;
        };
        reached += 1;
        for _ in 0..3.min(analytic.len()) {
            let i = r.gen_range(0..analytic.len());
            let mut plus = store.clone();
            plus.get_mut(name).unwrap().data[i] += STEP;
            let mut minus = store.clone();
            minus.get_mut(name).unwrap().data[i] -= STEP;
            let numeric = (total(&plus) - total(&minus)) / (2.0 * STEP);
            let e = rel_err(analytic[i], numeric);
            assert!(
                e < KINK_TOL,
                "{name}[{i}] analytic {} numeric {numeric} rel err {e}",
                analytic[i]
            );
        }
    }
    assert_eq!(reached, names.len(), "every parameter should receive a gradient");
}

pub fn bandwidths_follow_context_loss_only() {
    let scenes = tiny_scenes();
    let model = Model::new(NetworkSpec::tiny(), AblationVariant::Full, DEFAULT_LAMBDA);
    let cfg = TrainConfig::default();
    assert_eq!(cfg.bandwidth_routing, BandwidthRouting::CclOnly);
    let mut store = model.init_params(23, 1.7);
    store.get_mut(LOG_H_PARAM).unwrap().data = vec![1.7f64.ln(), 2.3f64.ln(), 1.3f64.ln()];
    let trainer = Trainer::new(&model, &scenes, &cfg).unwrap();
    let refs = batch(&scenes);
    let mut with_grads = store.clone();
    trainer.loss_and_grads(&mut with_grads, &refs).unwrap();
    let analytic = with_grads.grad(LOG_H_PARAM).unwrap().to_vec();
    let mu3 = cfg.variant.weights().mu3;
    let ccl = |s: &ParamStore| mu3 * trainer.loss(s, &refs).unwrap().ccl;
    for i in 0..3 {
        let mut plus = store.clone();
        plus.get_mut(LOG_H_PARAM).unwrap().data[i] += STEP;
        let mut minus = store.clone();
        minus.get_mut(LOG_H_PARAM).unwrap().data[i] -= STEP;
        let numeric = (ccl(&plus) - ccl(&minus)) / (2.0 * STEP);
        let e = rel_err(analytic[i], numeric);
        assert!(
            e < KINK_TOL,
            "log_h[{i}] analytic {} numeric {numeric} rel err {e}",
            analytic[i]
        );
    }
}

/// Every check, by name.
pub const CASES: &[(&str, fn())] = &[
    ("elementwise_ops", elementwise_ops),
    ("detach_blocks_gradient", detach_blocks_gradient),
    ("structural_and_reduction_ops", structural_and_reduction_ops),
    ("linear_and_convolution_ops", linear_and_convolution_ops),
    ("bilinear_sampling", bilinear_sampling),
    ("energy_map_log_bandwidths", energy_map_log_bandwidths),
    ("projection_and_context_loss", projection_and_context_loss),
    ("lstm_cell", lstm_cell),
    ("predictor_end_to_end", predictor_end_to_end),
    ("transfer_model_end_to_end", transfer_model_end_to_end),
    (
        "full_loss_matches_finite_differences",
        full_loss_matches_finite_differences,
    ),
    (
        "bandwidths_follow_context_loss_only",
        bandwidths_follow_context_loss_only,
    ),
];
