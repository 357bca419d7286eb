//! The six pipeline commands. Each reads its prerequisites from the output
//! directory and writes its artifacts next to a `manifest.json` recording
//! the seed and configuration.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use ctxfer_core::context_fusion::{render_heatmap, DrawList, NormStats, StatsMode};
use ctxfer_core::density::{bandwidth_in_pixels, scene_labels};
use ctxfer_core::evaluation::{best_of_k, MetricReport, SceneMetrics};
use ctxfer_core::grid::{load_grid, save_grid, GridSidecar};
use ctxfer_core::neural::{load_metadata, ParamStore};
use ctxfer_core::synth::generate;
use ctxfer_core::training::{train, write_metrics_csv, AblationVariant, Model, SceneData};
use ctxfer_core::transfer_physical::{train_transfer, TransferModel, TransferPair, TRANSFER_PREFIX};
use ctxfer_core::{Grid, Homography, RealPoint, SampleId, SceneGeometry, PRED_LEN};
use serde::Serialize;

use crate::config::RunConfig;
use crate::manifest::{LoadedScene, SceneEntry, SceneManifest};
use crate::{create_dir, write_file, CliError};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Command {
    Synth,
    FitDensity,
    TrainTransfer,
    Train,
    Eval,
    Render,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Self::Synth => "synth",
            Self::FitDensity => "fit-density",
            Self::TrainTransfer => "train-transfer",
            Self::Train => "train",
            Self::Eval => "eval",
            Self::Render => "render",
        }
    }
}

impl fmt::Display for Command {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Command {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        [
            Self::Synth,
            Self::FitDensity,
            Self::TrainTransfer,
            Self::Train,
            Self::Eval,
            Self::Render,
        ]
        .into_iter()
        .find(|c| c.name() == s)
        .ok_or_else(|| format!("unknown command {s:?}"))
    }
}

pub fn run(command: Command, cfg: &RunConfig) -> Result<(), CliError> {
    cfg.validate()?;
    log::info!(
        "{command}: seed {} variant {} out {}",
        cfg.seed,
        cfg.variant,
        cfg.paths.out.display()
    );
    match command {
        Command::Synth => synth(cfg),
        Command::FitDensity => fit_density(cfg),
        Command::TrainTransfer => train_transfer_cmd(cfg),
        Command::Train => train_cmd(cfg),
        Command::Eval => eval(cfg),
        Command::Render => render(cfg),
    }
}

#[derive(Serialize)]
struct RunRecord<'a> {
    command: &'static str,
    seed: u64,
    variant: AblationVariant,
    config: &'a RunConfig,
}

fn write_run_record(dir: &Path, command: Command, cfg: &RunConfig) -> Result<(), CliError> {
    let record = RunRecord {
        command: command.name(),
        seed: cfg.seed,
        variant: cfg.variant,
        config: cfg,
    };
    let text = serde_json::to_string_pretty(&record).expect("config serializes") + "\n";
    write_file(&dir.join("manifest.json"), text.as_bytes())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).expect("value serializes") + "\n";
    write_file(path, text.as_bytes())
}

fn require(path: &Path, artifact: &str, command: &'static str) -> Result<(), CliError> {
    if path.exists() {
        Ok(())
    } else {
        Err(CliError::MissingArtifact {
            artifact: artifact.to_owned(),
            path: path.to_owned(),
            command,
        })
    }
}

fn synth(cfg: &RunConfig) -> Result<(), CliError> {
    let out = &cfg.paths.out;
    let mut synth_cfg = cfg.synth.clone();
    synth_cfg.seed = cfg.seed;
    let mut entries = Vec::new();
    for scene in generate(&synth_cfg)? {
        let files = scene.write(&out.join("scenes"))?;
        let rel = |p: &Path| Path::new("scenes").join(p);
        entries.push(SceneEntry {
            name: files.name,
            annotations: rel(&files.annotations),
            image: Some(rel(&files.image)),
            homography: Some(rel(&files.homography)),
            units: Default::default(),
            stride: 1,
            columns: Default::default(),
            width: None,
            height: None,
        });
    }
    let manifest = SceneManifest {
        seed: Some(cfg.seed),
        scenes: entries,
    };
    manifest.save(&out.join("scenes.toml"))?;
    write_json(&out.join("synth.json"), &synth_cfg)?;
    log::info!("wrote {} scenes to {}", manifest.scenes.len(), out.display());
    Ok(())
}

fn load_manifest(cfg: &RunConfig) -> Result<(SceneManifest, PathBuf), CliError> {
    let path = cfg.manifest_path();
    require(&path, "scene manifest", "synth")?;
    let manifest = SceneManifest::load(&path)?;
    if manifest.scenes.is_empty() {
        return Err(CliError::Config(format!("{} lists no scenes", path.display())));
    }
    let base = path.parent().map(Path::to_owned).unwrap_or_default();
    Ok((manifest, base))
}

fn load_scenes(cfg: &RunConfig) -> Result<Vec<LoadedScene>, CliError> {
    let (manifest, base) = load_manifest(cfg)?;
    manifest.load_scenes(&base, (cfg.grid.rows, cfg.grid.cols))
}

fn geometry_of(loaded: &LoadedScene) -> SceneGeometry {
    SceneGeometry::new(
        loaded.scene.homography.unwrap_or_else(Homography::identity),
        loaded.grid,
    )
}

fn fit_density(cfg: &RunConfig) -> Result<(), CliError> {
    let dir = cfg.labels_dir();
    create_dir(&dir)?;
    for loaded in load_scenes(cfg)? {
        let geometry = geometry_of(&loaded);
        let center = loaded
            .scene
            .bounds()
            .map(|(lo, hi)| RealPoint::new((lo.x + hi.x) / 2.0, (lo.y + hi.y) / 2.0))
            .unwrap_or(RealPoint::new(0.0, 0.0));
        let h_pixels = bandwidth_in_pixels(cfg.density.h, &geometry.homography, center)?;
        let labels = scene_labels(
            &loaded.scene,
            &geometry,
            h_pixels,
            cfg.density.kernel,
            cfg.density.subsamples,
        )?;
        let sidecar = GridSidecar {
            rows: cfg.grid.rows,
            cols: cfg.grid.cols,
            h: Some(h_pixels),
            scene: loaded.scene.name.clone(),
            components: Vec::new(),
        };
        save_grid(&dir.join(&loaded.scene.name), labels.grid(), &sidecar)?;
        log::info!(
            "{}: labels with h = {h_pixels:.3} px, mass {:.4}",
            loaded.scene.name,
            labels.grid().sum()
        );
    }
    write_run_record(&dir, Command::FitDensity, cfg)
}

fn load_labels(cfg: &RunConfig, scene: &str) -> Result<Grid, CliError> {
    let stem = cfg.labels_dir().join(scene);
    require(
        &stem.with_extension("f32"),
        &format!("activity labels for {scene}"),
        "fit-density",
    )?;
    let (grid, sidecar) = load_grid(&stem)?;
    if (sidecar.rows, sidecar.cols) != (cfg.grid.rows, cfg.grid.cols) {
        return Err(CliError::Config(format!(
            "labels for {scene} are {}x{} but the grid is {}x{}; rerun fit-density",
            sidecar.rows, sidecar.cols, cfg.grid.rows, cfg.grid.cols
        )));
    }
    Ok(grid)
}

/// Scenes split into training and test data. Labels are attached when
/// `with_labels` is set.
struct Split {
    train: Vec<SceneData>,
    test: SceneData,
}

fn scene_data(cfg: &RunConfig, loaded: &LoadedScene, labels: Option<Grid>) -> Result<SceneData, CliError> {
    let spec = cfg.network_spec()?;
    let mut data = SceneData::from_scene(
        &loaded.scene,
        loaded.grid,
        loaded.image.as_ref(),
        spec.transfer.input_size,
        labels,
        cfg.social.neighbor_radius,
    );
    if let Some(n) = cfg.train.max_samples_per_scene {
        let step = (data.samples.len() / n.max(1)).max(1);
        data.samples = data.samples.iter().step_by(step).take(n).cloned().collect();
    }
    Ok(data)
}

fn test_scene_name(cfg: &RunConfig, scenes: &[LoadedScene]) -> Result<String, CliError> {
    let name = match &cfg.eval.test_scene {
        Some(n) => n.clone(),
        None => scenes.last().map(|s| s.scene.name.clone()).unwrap_or_default(),
    };
    let names: Vec<&str> = scenes.iter().map(|s| s.scene.name.as_str()).collect();
    let plan = ctxfer_core::datasets::leave_one_out(&names, &name)?;
    if plan.is_degenerate() {
        return Err(CliError::Config(format!(
            "holding out {name} leaves no training scenes"
        )));
    }
    Ok(plan.test_scene)
}

fn split(cfg: &RunConfig, with_labels: bool) -> Result<Split, CliError> {
    let scenes = load_scenes(cfg)?;
    let test_name = test_scene_name(cfg, &scenes)?;
    let mut train = Vec::new();
    let mut test = None;
    for loaded in &scenes {
        let is_test = loaded.scene.name == test_name;
        let labels = if with_labels && !is_test {
            Some(load_labels(cfg, &loaded.scene.name)?)
        } else {
            None
        };
        let data = scene_data(cfg, loaded, labels)?;
        if is_test {
            test = Some(data);
        } else {
            train.push(data);
        }
    }
    Ok(Split {
        train,
        test: test.expect("test scene is in the manifest"),
    })
}

fn transfer_checkpoint(cfg: &RunConfig) -> PathBuf {
    cfg.transfer_dir().join("model.ckpt")
}

fn train_transfer_cmd(cfg: &RunConfig) -> Result<(), CliError> {
    let spec = cfg.network_spec()?;
    let split = split(cfg, true)?;
    let mut pairs = Vec::new();
    for s in &split.train {
        let image = s
            .image
            .clone()
            .ok_or_else(|| CliError::Config(format!("scene {} has no image", s.name)))?;
        let labels = s.labels.as_ref().expect("labels were loaded");
        pairs.push(TransferPair {
            scene: s.name.clone(),
            image,
            labels: cfg.train.label_scale.apply(labels),
        });
    }
    let model = Model::new(spec.clone(), AblationVariant::Full, cfg.lambda()?);
    let full = model.init_params(cfg.seed, cfg.social.init_bandwidth);
    let mut store = ParamStore::new();
    for (name, t) in full.iter().filter(|(n, _)| n.starts_with(TRANSFER_PREFIX)) {
        store.insert(name, t.clone());
    }
    let transfer = TransferModel::new(spec.transfer.clone());
    let curve = train_transfer(&transfer, &mut store, &pairs, &cfg.transfer_config())?;

    let dir = cfg.transfer_dir();
    create_dir(&dir)?;
    let mut csv = String::from("epoch");
    for p in &pairs {
        csv.push(',');
        csv.push_str(&p.scene);
    }
    csv.push_str(",mean\n");
    for (epoch, losses) in curve.iter().enumerate() {
        csv.push_str(&epoch.to_string());
        for l in losses {
            csv.push_str(&format!(",{l}"));
        }
        csv.push_str(&format!(",{}\n", losses.iter().sum::<f64>() / losses.len() as f64));
    }
    write_file(&dir.join("loss.csv"), csv.as_bytes())?;
    store.save(
        &transfer_checkpoint(cfg),
        serde_json::json!({ "seed": cfg.seed, "spec": spec.transfer }),
    )?;
    write_run_record(&dir, Command::TrainTransfer, cfg)
}

fn train_cmd(cfg: &RunConfig) -> Result<(), CliError> {
    let spec = cfg.network_spec()?;
    let physical = cfg.variant.uses_physical();
    if physical {
        require(&transfer_checkpoint(cfg), "transfer checkpoint", "train-transfer")?;
    }
    let split = split(cfg, physical)?;
    let model = Model::new(spec.clone(), cfg.variant, cfg.lambda()?);
    let mut store = model.init_params(cfg.seed, cfg.social.init_bandwidth);
    if physical {
        let pretrained = ParamStore::load(&transfer_checkpoint(cfg))?;
        for (name, t) in pretrained.iter() {
            match store.get_mut(name) {
                Some(slot) if slot.shape == t.shape => *slot = t.clone(),
                _ => {
                    return Err(CliError::Config(format!(
                        "transfer checkpoint does not fit the model at {name}; rerun train-transfer"
                    )))
                }
            }
        }
    }
    let tc = cfg.train_config()?;
    let outcome = train(&model, &mut store, &split.train, &[], &tc)?;

    let ckpt = cfg.checkpoint_path();
    let dir = ckpt.parent().map(Path::to_owned).unwrap_or_default();
    create_dir(&dir)?;
    write_metrics_csv(&dir.join("metrics.csv"), &outcome.metrics)?;
    write_json(&dir.join("stats.json"), &outcome.frozen_stats)?;
    store.save(
        &ckpt,
        serde_json::json!({
            "seed": cfg.seed,
            "variant": cfg.variant,
            "test_scene": split.test.name,
            "spec": spec,
        }),
    )?;
    write_run_record(&dir, Command::Train, cfg)
}

/// The trained model and the normalization stats for inference.
fn load_trained(cfg: &RunConfig) -> Result<(Model, ParamStore, Option<NormStats>), CliError> {
    let ckpt = cfg.checkpoint_path();
    require(&ckpt, &format!("{} checkpoint", cfg.variant), "train")?;
    let meta = load_metadata(&ckpt)?;
    if let Some(v) = meta.get("variant").and_then(|v| v.as_str()) {
        if v != cfg.variant.name() {
            return Err(CliError::Config(format!(
                "checkpoint {} was trained as {v}, not {}",
                ckpt.display(),
                cfg.variant
            )));
        }
    }
    let store = ParamStore::load(&ckpt)?;
    let model = Model::new(cfg.network_spec()?, cfg.variant, cfg.lambda()?);
    let stats = match cfg.eval.stats {
        StatsMode::Batch => None,
        StatsMode::TrainFrozen => {
            let path = ckpt.with_file_name("stats.json");
            require(&path, "frozen normalization stats", "train")?;
            let text = std::fs::read_to_string(&path).map_err(|source| CliError::Io {
                path: path.clone(),
                source,
            })?;
            Some(serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?)
        }
    };
    Ok((model, store, stats))
}

fn eval(cfg: &RunConfig) -> Result<(), CliError> {
    if cfg.eval.k != 1 {
        return Err(CliError::Config(format!(
            "best-of-{} needs multiple decoder heads; the predictor has one (k = 1)",
            cfg.eval.k
        )));
    }
    let (model, store, stats) = load_trained(cfg)?;
    let split = split(cfg, false)?;
    let test = &split.test;
    let predictions = model.predict_scene(&store, test, stats.as_ref())?;
    let candidates: Vec<Vec<[RealPoint; PRED_LEN]>> = predictions.into_iter().map(|p| vec![p]).collect();
    let truth: Vec<&[RealPoint]> = test.samples.iter().map(|s| &s.future[..]).collect();
    let (ade, fde) = best_of_k(&candidates, &truth)?;
    let report = MetricReport::from_scenes(vec![SceneMetrics {
        scene: test.name.clone(),
        ade,
        fde,
        n_samples: truth.len(),
    }])?;

    let dir = cfg.eval_dir();
    create_dir(&dir)?;
    write_file(&dir.join("report.json"), report.to_json().as_bytes())?;
    write_file(&dir.join("report.txt"), report.to_text_table().as_bytes())?;
    write_run_record(&dir, Command::Eval, cfg)?;
    log::info!(
        "{}: ADE {:.4} FDE {:.4} over {} samples",
        test.name,
        report.ade,
        report.fde,
        report.n_samples
    );
    Ok(())
}

fn render(cfg: &RunConfig) -> Result<(), CliError> {
    if cfg.render.samples.is_empty() {
        return Err(CliError::Config(
            "no sample ids to render; pass --sample scene:agent@frame".into(),
        ));
    }
    let ids = cfg
        .render
        .samples
        .iter()
        .map(|s| s.parse::<SampleId>().map_err(CliError::Config))
        .collect::<Result<Vec<_>, _>>()?;
    let (model, store, stats) = load_trained(cfg)?;
    let scenes = load_scenes(cfg)?;
    let dir = cfg.render_dir();
    create_dir(&dir)?;
    for id in &ids {
        let loaded = scenes
            .iter()
            .find(|s| s.scene.name == id.scene)
            .ok_or_else(|| CliError::UnknownSample(id.to_string()))?;
        let mut data = scene_data(cfg, loaded, None)?;
        data.samples.retain(|s| s.id == *id);
        if data.samples.is_empty() {
            // Thinning may have dropped it; look in the full window set.
            data = SceneData::from_scene(
                &loaded.scene,
                loaded.grid,
                loaded.image.as_ref(),
                model.spec().transfer.input_size,
                None,
                cfg.social.neighbor_radius,
            );
            data.samples.retain(|s| s.id == *id);
        }
        let Some(sample) = data.samples.first() else {
            return Err(CliError::UnknownSample(id.to_string()));
        };
        let stem = format!("{}_{}_{}", id.scene, id.agent_id, id.start_frame);
        let contexts = model.scene_contexts(&store, &data, stats.as_ref())?;
        let context = &contexts[0].values;
        let predicted = model.predict_sample(&store, context, sample)?;
        let overlay = DrawList::for_sample(sample, Some(&predicted), &data.geometry)?;
        render_heatmap(
            context,
            cfg.render.palette,
            Some(&overlay),
            &dir.join(format!("{stem}_context.png")),
        )?;
        if let (true, Some(image)) = (cfg.variant.uses_physical(), &data.image) {
            let activity = model.transfer.predict_grid(&store, image)?.into_grid();
            render_heatmap(
                &activity,
                cfg.render.palette,
                Some(&overlay),
                &dir.join(format!("{stem}_activity.png")),
            )?;
        }
        log::info!("rendered {id}");
    }
    write_run_record(&dir, Command::Render, cfg)
}
