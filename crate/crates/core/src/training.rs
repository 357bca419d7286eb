//! The three-term objective, batch gradient computation and the end-to-end
//! training loop with its ablation variants.
//!
//! One step over a batch runs in two stages. A batch graph holds the
//! transfer model output per scene, the energy map per sample, the batch
//! normalization bounds and the fused contexts. Each sample then gets its
//! own predictor graph that takes its context as a leaf. Context gradients
//! from the sample graphs are fed back as seeds into the batch graph, which
//! lets the transfer model and the bandwidths receive different loss terms.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::context_fusion::{fuse, fuse_social_only, ContextImage, NormStats};
use crate::datasets::{window_samples, SampleId, Scene, TrajectorySample, PRED_LEN};
use crate::evaluation;
use crate::geometry::{GeometryError, GridSpec, Homography, RealPoint, SceneGeometry};
use crate::grid::Grid;
use crate::neural::{
    optimizer_step, points_from, AutodiffError, Graph, NetworkSpec, NeuralError, OptimError, OptimizerConfig,
    ParamStore, Predictor, Var,
};
use crate::transfer_physical::{SceneImage, TransferError, TransferModel, TRANSFER_PREFIX};
use crate::transfer_social::{
    energy_from_sources, energy_node, EnergySources, SocialParams, DEFAULT_BANDWIDTH, DEFAULT_LAMBDA, LOG_H_PARAM,
};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("non-finite loss component")]
    NonFinite,
    #[error("non-finite loss on sample {0}")]
    NonFiniteLoss(SampleId),
    #[error("invalid loss weights {0:?}")]
    InvalidWeights([f64; 3]),
    #[error("dataset has no samples")]
    EmptyDataset,
    #[error("scene {0:?} has no image but the variant uses physical transfer")]
    MissingImage(String),
    #[error("scene {0:?} has no activity labels but the variant uses the transfer loss")]
    MissingLabels(String),
    #[error("grid mismatch: context grid is {expected:?} but scene {scene:?} uses {actual:?}")]
    GridMismatch {
        scene: String,
        expected: (usize, usize),
        actual: (usize, usize),
    },
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Neural(#[from] NeuralError),
    #[error(transparent)]
    Transfer(#[from] TransferError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Optim(#[from] OptimError),
    #[error("validation: {0}")]
    Validation(Box<evaluation::EvalError>),
    #[error("writing metrics: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub mu1: f64,
    pub mu2: f64,
    pub mu3: f64,
}

impl LossWeights {
    pub fn new(mu1: f64, mu2: f64, mu3: f64) -> Result<Self, TrainError> {
        let all = [mu1, mu2, mu3];
        if all.iter().any(|m| !(m.is_finite() && *m >= 0.0)) || all.iter().all(|m| *m == 0.0) {
            return Err(TrainError::InvalidWeights(all));
        }
        Ok(Self { mu1, mu2, mu3 })
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AblationVariant {
    #[default]
    Full,
    /// No physical transfer and no transfer loss.
    A0,
    /// No context consistency loss.
    A1,
}

impl AblationVariant {
    pub fn weights(self) -> LossWeights {
        match self {
            Self::Full => LossWeights {
                mu1: 0.3,
                mu2: 0.3,
                mu3: 0.4,
            },
            Self::A0 => LossWeights {
                mu1: 0.5,
                mu2: 0.0,
                mu3: 0.5,
            },
            Self::A1 => LossWeights {
                mu1: 0.5,
                mu2: 0.5,
                mu3: 0.0,
            },
        }
    }

    pub fn uses_physical(self) -> bool {
        self != Self::A0
    }

    pub fn uses_ccl(self) -> bool {
        self != Self::A1
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Full => "full",
            Self::A0 => "a0",
            Self::A1 => "a1",
        }
    }
}

impl fmt::Display for AblationVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AblationVariant {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "full" => Ok(Self::Full),
            "a0" => Ok(Self::A0),
            "a1" => Ok(Self::A1),
            other => Err(format!("unknown variant {other:?} (expected full, a0 or a1)")),
        }
    }
}

/// Sum over points of the squared Euclidean distance.
pub fn adl(predicted: &[RealPoint], truth: &[RealPoint]) -> Result<f64, TrainError> {
    if predicted.len() != truth.len() {
        return Err(TrainError::LengthMismatch(predicted.len(), truth.len()));
    }
    Ok(predicted
        .iter()
        .zip(truth)
        .map(|(a, b)| (a.x - b.x).powi(2) + (a.y - b.y).powi(2))
        .sum())
}

/// Sum of the context sampled at each predicted point.
pub fn ccl(predicted: &[RealPoint], context: &Grid, geometry: &SceneGeometry) -> Result<f64, TrainError> {
    let mut total = 0.0;
    for p in predicted {
        let (gx, gy) = geometry.real_to_continuous(*p)?;
        total += crate::context_fusion::sample_context(context, gx, gy);
    }
    Ok(total)
}

pub fn total_loss(adl: f64, stl: f64, ccl: f64, w: &LossWeights) -> Result<f64, TrainError> {
    if ![adl, stl, ccl].iter().all(|v| v.is_finite()) {
        return Err(TrainError::NonFinite);
    }
    Ok(w.mu1 * adl + w.mu2 * stl + w.mu3 * ccl)
}

/// Maps `[n, 2]` real points to continuous grid coordinates.
pub fn project_node(g: &mut Graph, points: Var, geometry: &SceneGeometry) -> Result<Var, GeometryError> {
    let pts: Vec<RealPoint> = g.value(points).chunks(2).map(|c| RealPoint::new(c[0], c[1])).collect();
    let mut value = Vec::with_capacity(2 * pts.len());
    let mut jac = Vec::with_capacity(pts.len());
    for p in &pts {
        let (gx, gy) = geometry.real_to_continuous(*p)?;
        value.extend([gx, gy]);
        jac.push(geometry.continuous_jacobian(*p)?);
    }
    let shape = g.shape(points).to_vec();
    Ok(g.custom(
        &[points],
        shape,
        value,
        Box::new(move |c| {
            let mut out = vec![0.0; c.grad.len()];
            for (i, j) in jac.iter().enumerate() {
                let (a, b) = (c.grad[2 * i], c.grad[2 * i + 1]);
                out[2 * i] = a * j[0][0] + b * j[1][0];
                out[2 * i + 1] = a * j[0][1] + b * j[1][1];
            }
            vec![Some(out)]
        }),
    ))
}

/// Context consistency term for a `[PRED_LEN, 2]` prediction node.
pub fn ccl_node(g: &mut Graph, predicted: Var, context: Var, geometry: &SceneGeometry) -> Result<Var, GeometryError> {
    let coords = project_node(g, predicted, geometry)?;
    let values = g.bilinear_sample(context, coords);
    Ok(g.sum(values))
}

fn flat(points: &[RealPoint]) -> Vec<f64> {
    points.iter().flat_map(|p| [p.x, p.y]).collect()
}

/// Which loss terms update the log-bandwidths.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BandwidthRouting {
    #[default]
    CclOnly,
    AdlAndCcl,
}

/// Rescaling applied to activity labels before the transfer loss.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelScale {
    Raw,
    /// Divide each scene's labels by their maximum.
    #[default]
    UnitMax,
}

impl LabelScale {
    pub fn apply(self, labels: &Grid) -> Grid {
        let mut out = labels.clone();
        if self == Self::UnitMax {
            let m = labels.max();
            if m > 0.0 {
                out.data_mut().iter_mut().for_each(|v| *v /= m);
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerConfig,
    pub seed: u64,
    pub variant: AblationVariant,
    pub lambda: [f64; 3],
    pub init_bandwidth: f64,
    /// Stops context-loss gradients from reaching the transfer model.
    pub freeze_g: bool,
    pub bandwidth_routing: BandwidthRouting,
    pub label_scale: LabelScale,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 32,
            optimizer: OptimizerConfig::adam(1e-3),
            seed: 0,
            variant: AblationVariant::Full,
            lambda: DEFAULT_LAMBDA,
            init_bandwidth: DEFAULT_BANDWIDTH,
            freeze_g: false,
            bandwidth_routing: BandwidthRouting::CclOnly,
            label_scale: LabelScale::UnitMax,
        }
    }
}

/// Everything the loop needs about one scene. `image` must already be at
/// the transfer model's input size.
#[derive(Clone, Debug)]
pub struct SceneData {
    pub name: String,
    pub geometry: SceneGeometry,
    pub image: Option<SceneImage>,
    pub labels: Option<Grid>,
    pub samples: Vec<TrajectorySample>,
}

impl SceneData {
    /// Windows `scene` into samples on the given grid. A missing homography
    /// means annotations are already in pixels. `image` is resized to
    /// `input_size` for the transfer model.
    pub fn from_scene(
        scene: &Scene,
        grid: GridSpec,
        image: Option<&SceneImage>,
        input_size: usize,
        labels: Option<Grid>,
        neighbor_radius: Option<f64>,
    ) -> Self {
        Self {
            name: scene.name.clone(),
            geometry: SceneGeometry::new(scene.homography.unwrap_or_else(Homography::identity), grid),
            image: image.map(|i| i.model_input(input_size)),
            labels,
            samples: window_samples(scene, neighbor_radius),
        }
    }
}

/// Predictor, transfer model and fixed social weights.
#[derive(Clone, Debug)]
pub struct Model {
    pub predictor: Predictor,
    pub transfer: TransferModel,
    pub variant: AblationVariant,
    pub lambda: [f64; 3],
}

impl Model {
    pub fn new(spec: NetworkSpec, variant: AblationVariant, lambda: [f64; 3]) -> Self {
        Self {
            transfer: TransferModel::new(spec.transfer.clone()),
            predictor: Predictor::new(spec),
            variant,
            lambda,
        }
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.predictor.spec
    }

    pub fn grid_shape(&self) -> (usize, usize) {
        (self.spec().grid_rows, self.spec().grid_cols)
    }

    /// Fresh parameters from `seed`. The transfer model is only created
    /// when the variant uses it.
    pub fn init_params(&self, seed: u64, init_bandwidth: f64) -> ParamStore {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        self.predictor.init_params(&mut store, &mut rng);
        if self.variant.uses_physical() {
            self.transfer.init_params(&mut store, &mut rng);
        }
        SocialParams::new([init_bandwidth; 3], self.lambda).write_to_store(&mut store);
        store
    }

    pub fn social_params(&self, store: &ParamStore) -> SocialParams {
        SocialParams::from_store(store, self.lambda)
            .unwrap_or_else(|| SocialParams::new([DEFAULT_BANDWIDTH; 3], self.lambda))
    }

    fn check_scene(&self, scene: &SceneData) -> Result<(), TrainError> {
        let shape = (scene.geometry.grid.rows, scene.geometry.grid.cols);
        if shape != self.grid_shape() {
            return Err(TrainError::GridMismatch {
                scene: scene.name.clone(),
                expected: self.grid_shape(),
                actual: shape,
            });
        }
        if self.variant.uses_physical() && scene.image.is_none() {
            return Err(TrainError::MissingImage(scene.name.clone()));
        }
        Ok(())
    }

    /// Context images for every sample of `scene`. Normalization bounds
    /// come from `stats` when given, otherwise from this scene alone.
    pub fn scene_contexts(
        &self,
        store: &ParamStore,
        scene: &SceneData,
        stats: Option<&NormStats>,
    ) -> Result<Vec<ContextImage>, TrainError> {
        self.check_scene(scene)?;
        let (rows, cols) = self.grid_shape();
        let social = self.social_params(store);
        let energies = scene
            .samples
            .par_iter()
            .map(|s| {
                let src = EnergySources::for_sample(s, &scene.geometry)?;
                Ok(energy_from_sources(&src, &social, rows, cols).values)
            })
            .collect::<Result<Vec<Grid>, TrainError>>()?;
        let activity = match (self.variant.uses_physical(), &scene.image) {
            (true, Some(img)) => Some(self.transfer.predict_grid(store, img)?.into_grid()),
            _ => None,
        };
        let stats = match stats {
            Some(s) => *s,
            None => NormStats::from_grids(activity.iter(), energies.iter()),
        };
        energies
            .iter()
            .zip(&scene.samples)
            .map(|(e, s)| {
                let mut c = match &activity {
                    Some(t) => fuse(t, e, &stats).expect("grids share the model shape"),
                    None => fuse_social_only(e, &stats),
                };
                c.sample = Some(s.id.clone());
                Ok(c)
            })
            .collect()
    }

    /// Forward prediction for one sample given its context.
    pub fn predict_sample(
        &self,
        store: &ParamStore,
        context: &Grid,
        sample: &TrajectorySample,
    ) -> Result<[RealPoint; PRED_LEN], TrainError> {
        let mut g = Graph::new();
        let c = g.constant(vec![context.rows(), context.cols()], context.data().to_vec());
        let y = self.predictor.predict(&mut g, store, c, &sample.observed)?;
        Ok(points_from(&g, y))
    }

    /// Predictions for every sample of `scene`, in sample order.
    pub fn predict_scene(
        &self,
        store: &ParamStore,
        scene: &SceneData,
        stats: Option<&NormStats>,
    ) -> Result<Vec<[RealPoint; PRED_LEN]>, TrainError> {
        let contexts = self.scene_contexts(store, scene, stats)?;
        contexts
            .par_iter()
            .zip(&scene.samples)
            .map(|(c, s)| self.predict_sample(store, &c.values, s))
            .collect()
    }

    /// Normalization bounds over every scene and sample in `scenes`.
    pub fn dataset_stats(&self, store: &ParamStore, scenes: &[SceneData]) -> Result<NormStats, TrainError> {
        let (rows, cols) = self.grid_shape();
        let social = self.social_params(store);
        let mut activity = Vec::new();
        let mut energies = Vec::new();
        for scene in scenes {
            self.check_scene(scene)?;
            if let (true, Some(img)) = (self.variant.uses_physical(), &scene.image) {
                activity.push(self.transfer.predict_grid(store, img)?.into_grid());
            }
            for s in &scene.samples {
                let src = EnergySources::for_sample(s, &scene.geometry)?;
                energies.push(energy_from_sources(&src, &social, rows, cols).values);
            }
        }
        Ok(NormStats::from_grids(activity.iter(), energies.iter()))
    }
}

/// Index of one sample inside a scene list.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub struct SampleRef {
    pub scene: usize,
    pub sample: usize,
}

/// Per-sample mean loss components over a batch.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BatchLoss {
    pub adl: f64,
    pub stl: f64,
    pub ccl: f64,
    pub total: f64,
}

struct SampleOut {
    adl: f64,
    ccl: f64,
    param_grads: Vec<(String, Vec<f64>)>,
    dc_total: Vec<f64>,
    dc_ccl: Option<Vec<f64>>,
}

/// Precomputed, parameter-independent data for a list of scenes.
pub struct Trainer<'a> {
    pub model: &'a Model,
    pub scenes: &'a [SceneData],
    pub cfg: &'a TrainConfig,
    sources: Vec<Vec<EnergySources>>,
    labels: Vec<Option<Grid>>,
}

impl<'a> Trainer<'a> {
    pub fn new(model: &'a Model, scenes: &'a [SceneData], cfg: &'a TrainConfig) -> Result<Self, TrainError> {
        let w = cfg.variant.weights();
        let mut sources = Vec::with_capacity(scenes.len());
        let mut labels = Vec::with_capacity(scenes.len());
        for scene in scenes {
            model.check_scene(scene)?;
            if model.variant.uses_physical() && w.mu2 > 0.0 && scene.labels.is_none() {
                return Err(TrainError::MissingLabels(scene.name.clone()));
            }
            let l = scene.labels.as_ref().map(|l| cfg.label_scale.apply(l));
            if let Some(l) = &l {
                if l.shape() != model.grid_shape() {
                    return Err(TrainError::GridMismatch {
                        scene: scene.name.clone(),
                        expected: model.grid_shape(),
                        actual: l.shape(),
                    });
                }
            }
            labels.push(l);
            sources.push(
                scene
                    .samples
                    .iter()
                    .map(|s| EnergySources::for_sample(s, &scene.geometry))
                    .collect::<Result<_, _>>()?,
            );
        }
        Ok(Self {
            model,
            scenes,
            cfg,
            sources,
            labels,
        })
    }

    pub fn all_refs(&self) -> Vec<SampleRef> {
        self.scenes
            .iter()
            .enumerate()
            .flat_map(|(si, s)| (0..s.samples.len()).map(move |i| SampleRef { scene: si, sample: i }))
            .collect()
    }

    fn sample(&self, r: SampleRef) -> &TrajectorySample {
        &self.scenes[r.scene].samples[r.sample]
    }

    /// Batch loss without gradients.
    pub fn loss(&self, store: &ParamStore, batch: &[SampleRef]) -> Result<BatchLoss, TrainError> {
        Ok(self.run(store, batch, false)?.0)
    }

    /// Batch loss; gradients of the routed objective are added to `store`.
    pub fn loss_and_grads(&self, store: &mut ParamStore, batch: &[SampleRef]) -> Result<BatchLoss, TrainError> {
        let (loss, grads) = self.run(store, batch, true)?;
        for (name, g) in &grads {
            store.accumulate_grad(name, g);
        }
        Ok(loss)
    }

    fn run(
        &self,
        store: &ParamStore,
        batch: &[SampleRef],
        with_grads: bool,
    ) -> Result<(BatchLoss, Vec<(String, Vec<f64>)>), TrainError> {
        if batch.is_empty() {
            return Err(TrainError::EmptyDataset);
        }
        let model = self.model;
        let w = self.cfg.variant.weights();
        let nb = batch.len() as f64;
        let (rows, cols) = model.grid_shape();
        let physical = model.variant.uses_physical();

        let mut g = Graph::new();
        let log_h = g.param(store, LOG_H_PARAM)?;

        // transfer output per scene: (node for the transfer loss, node for fusion)
        let mut activity: BTreeMap<usize, (Var, Var)> = BTreeMap::new();
        if physical {
            for r in batch {
                if activity.contains_key(&r.scene) {
                    continue;
                }
                let img = self.scenes[r.scene]
                    .image
                    .as_ref()
                    .ok_or_else(|| TrainError::MissingImage(self.scenes[r.scene].name.clone()))?;
                let input = model.transfer.input_node(&mut g, img)?;
                let t = model.transfer.forward(&mut g, store, input)?;
                let t_fuse = if self.cfg.freeze_g { g.detach(t) } else { t };
                activity.insert(r.scene, (t, t_fuse));
            }
        }

        let energies: Vec<Var> = batch
            .iter()
            .map(|r| {
                energy_node(
                    &mut g,
                    log_h,
                    &self.sources[r.scene][r.sample],
                    model.lambda,
                    rows,
                    cols,
                )
            })
            .collect();
        let e_lo = g.min_all(&energies);
        let e_hi = g.max_all(&energies);
        let t_bounds = (!activity.is_empty()).then(|| {
            let ts: Vec<Var> = activity.values().map(|a| a.1).collect();
            (g.min_all(&ts), g.max_all(&ts))
        });
        let mut normalized_t: BTreeMap<usize, Var> = BTreeMap::new();
        if let Some((lo, hi)) = t_bounds {
            for (&s, &(_, t_fuse)) in &activity {
                let n = g.normalize(t_fuse, lo, hi);
                normalized_t.insert(s, n);
            }
        }
        let contexts: Vec<Var> = batch
            .iter()
            .zip(&energies)
            .map(|(r, &e)| {
                let ne = g.normalize(e, e_lo, e_hi);
                let c = match normalized_t.get(&r.scene) {
                    Some(&nt) => g.sub(ne, nt),
                    None => ne,
                };
                g.add_scalar(c, 1.0)
            })
            .collect();

        let mut stl_node = None;
        let mut stl_sum = 0.0;
        if physical && w.mu2 > 0.0 {
            let mut terms = Vec::new();
            for (&s, &(t, _)) in &activity {
                let labels = self.labels[s]
                    .as_ref()
                    .ok_or_else(|| TrainError::MissingLabels(self.scenes[s].name.clone()))?;
                let target = g.constant(vec![rows, cols], labels.data().to_vec());
                let d = g.sq_diff_sum(t, target);
                let count = batch.iter().filter(|r| r.scene == s).count();
                terms.push((d, count as f64));
            }
            let node = g.weighted_sum(&terms);
            stl_sum = g.scalar(node);
            stl_node = Some(node);
        }

        let context_values: Vec<Vec<f64>> = contexts.iter().map(|c| g.value(*c).to_vec()).collect();
        let outs: Vec<SampleOut> = batch
            .par_iter()
            .zip(&context_values)
            .map(|(r, c)| self.sample_pass(store, *r, c, nb, with_grads))
            .collect::<Result<_, _>>()?;

        let adl_sum: f64 = outs.iter().map(|o| o.adl).sum();
        let ccl_sum: f64 = outs.iter().map(|o| o.ccl).sum();
        let loss = BatchLoss {
            adl: adl_sum / nb,
            stl: stl_sum / nb,
            ccl: ccl_sum / nb,
            total: total_loss(adl_sum / nb, stl_sum / nb, ccl_sum / nb, &w)?,
        };
        if !with_grads {
            return Ok((loss, Vec::new()));
        }

        let mut out: Vec<(String, Vec<f64>)> = outs.iter().flat_map(|o| o.param_grads.iter().cloned()).collect();
        let mut collect = |grads: &crate::neural::Gradients, keep: &dyn Fn(&str) -> bool| {
            for (name, v) in g.params() {
                if keep(name) {
                    out.push((name.clone(), grads.get_or_zero(&g, *v)));
                }
            }
        };

        let routing = self.cfg.bandwidth_routing;
        let mut seeds: Vec<(Var, Vec<f64>)> = Vec::new();
        if let Some(node) = stl_node {
            seeds.push((node, vec![w.mu2 / nb]));
        }
        for (c, o) in contexts.iter().zip(&outs) {
            seeds.push((*c, o.dc_total.clone()));
        }
        let mut targets: Vec<Var> = g
            .params()
            .iter()
            .filter(|(n, _)| n.starts_with(TRANSFER_PREFIX))
            .map(|(_, v)| *v)
            .collect();
        if routing == BandwidthRouting::AdlAndCcl {
            targets.push(log_h);
        }
        if !targets.is_empty() {
            let grads = g.backward(&seeds, Some(&targets))?;
            collect(&grads, &|n| {
                n.starts_with(TRANSFER_PREFIX) || (routing == BandwidthRouting::AdlAndCcl && n == LOG_H_PARAM)
            });
        }
        if routing == BandwidthRouting::CclOnly && outs.iter().any(|o| o.dc_ccl.is_some()) {
            let seeds: Vec<(Var, Vec<f64>)> = contexts
                .iter()
                .zip(&outs)
                .filter_map(|(c, o)| o.dc_ccl.clone().map(|d| (*c, d)))
                .collect();
            let grads = g.backward(&seeds, Some(&[log_h]))?;
            collect(&grads, &|n| n == LOG_H_PARAM);
        }
        Ok((loss, out))
    }

    fn sample_pass(
        &self,
        store: &ParamStore,
        r: SampleRef,
        context: &[f64],
        nb: f64,
        with_grads: bool,
    ) -> Result<SampleOut, TrainError> {
        let model = self.model;
        let w = self.cfg.variant.weights();
        let sample = self.sample(r);
        let (rows, cols) = model.grid_shape();
        let mut g = Graph::new();
        let c = g.leaf(vec![rows, cols], context.to_vec(), with_grads);
        let pred = model.predictor.predict(&mut g, store, c, &sample.observed)?;
        let truth = g.constant(vec![PRED_LEN, 2], flat(&sample.future));
        let adl = g.sq_diff_sum(pred, truth);
        let ccl = if w.mu3 > 0.0 {
            Some(ccl_node(&mut g, pred, c, &self.scenes[r.scene].geometry)?)
        } else {
            None
        };
        let adl_v = g.scalar(adl);
        let ccl_v = ccl.map_or(0.0, |v| g.scalar(v));
        if !(adl_v.is_finite() && ccl_v.is_finite()) {
            return Err(TrainError::NonFiniteLoss(sample.id.clone()));
        }
        if !with_grads {
            return Ok(SampleOut {
                adl: adl_v,
                ccl: ccl_v,
                param_grads: Vec::new(),
                dc_total: Vec::new(),
                dc_ccl: None,
            });
        }
        let mut terms = vec![(adl, w.mu1 / nb)];
        if let Some(v) = ccl {
            terms.push((v, w.mu3 / nb));
        }
        let loss = g.weighted_sum(&terms);
        let grads = g.backward_scalar(loss)?;
        let param_grads = g
            .params()
            .iter()
            .map(|(n, v)| (n.clone(), grads.get_or_zero(&g, *v)))
            .collect();
        let dc_total = grads.get_or_zero(&g, c);
        let dc_ccl = match (ccl, self.cfg.bandwidth_routing) {
            (Some(v), BandwidthRouting::CclOnly) => {
                let gc = g.backward(&[(v, vec![w.mu3 / nb])], Some(&[c]))?;
                Some(gc.get_or_zero(&g, c))
            }
            _ => None,
        };
        Ok(SampleOut {
            adl: adl_v,
            ccl: ccl_v,
            param_grads,
            dc_total,
            dc_ccl,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub adl: f64,
    pub stl: f64,
    pub ccl: f64,
    pub total: f64,
    pub val_ade: Option<f64>,
    pub val_fde: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOutcome {
    pub metrics: Vec<EpochMetrics>,
    /// Bounds over the whole training set after the last epoch.
    pub frozen_stats: NormStats,
}

/// Trains `store` in place. `val` may be empty; otherwise ADE/FDE on it are
/// logged every epoch with per-scene normalization.
pub fn train(
    model: &Model,
    store: &mut ParamStore,
    scenes: &[SceneData],
    val: &[SceneData],
    cfg: &TrainConfig,
) -> Result<TrainOutcome, TrainError> {
    let trainer = Trainer::new(model, scenes, cfg)?;
    let mut refs = trainer.all_refs();
    if refs.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut metrics = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        refs.shuffle(&mut rng);
        let mut acc = BatchLoss::default();
        for batch in refs.chunks(cfg.batch_size.max(1)) {
            store.zero_grads();
            let l = trainer.loss_and_grads(store, batch)?;
            let k = batch.len() as f64;
            acc.adl += l.adl * k;
            acc.stl += l.stl * k;
            acc.ccl += l.ccl * k;
            acc.total += l.total * k;
            optimizer_step(store, &cfg.optimizer)?;
        }
        store.zero_grads();
        let n = refs.len() as f64;
        let (val_ade, val_fde) = if val.iter().any(|s| !s.samples.is_empty()) {
            let r = evaluation::evaluate_scenes(model, store, val, None).map_err(|e| match e {
                evaluation::EvalError::Model(inner) => *inner,
                other => TrainError::Validation(Box::new(other)),
            })?;
            (Some(r.ade), Some(r.fde))
        } else {
            (None, None)
        };
        let m = EpochMetrics {
            epoch,
            adl: acc.adl / n,
            stl: acc.stl / n,
            ccl: acc.ccl / n,
            total: acc.total / n,
            val_ade,
            val_fde,
        };
        log::info!(
            "epoch {epoch}: total {:.6} adl {:.6} stl {:.6} ccl {:.6}",
            m.total,
            m.adl,
            m.stl,
            m.ccl
        );
        metrics.push(m);
    }
    let frozen_stats = model.dataset_stats(store, scenes)?;
    Ok(TrainOutcome { metrics, frozen_stats })
}

pub const METRICS_HEADER: &str = "epoch,adl,stl,ccl,total,val_ade,val_fde";

pub fn metrics_csv(metrics: &[EpochMetrics]) -> String {
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for m in metrics {
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            m.epoch,
            m.adl,
            m.stl,
            m.ccl,
            m.total,
            opt(m.val_ade),
            opt(m.val_fde)
        ));
    }
    out
}

pub fn write_metrics_csv(path: &Path, metrics: &[EpochMetrics]) -> Result<(), TrainError> {
    std::fs::write(path, metrics_csv(metrics))?;
    Ok(())
}
