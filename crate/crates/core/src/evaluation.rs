//! Displacement metrics, best-of-K reduction and the held-out evaluation
//! harness.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::context_fusion::{fuse, ContextImage, NormStats};
use crate::datasets::{SplitPlan, PRED_LEN};
use crate::geometry::{GeometryError, RealPoint};
use crate::neural::ParamStore;
use crate::training::{Model, SceneData, TrainError};
use crate::transfer_social::{linear_prior_real, social_energy, SocialParams};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("no candidates for sample {0}")]
    EmptyCandidates(usize),
    #[error("no test samples")]
    EmptyTestSet,
    #[error("test scene {0:?} not loaded")]
    UnknownScene(String),
    #[error(transparent)]
    Model(#[from] Box<TrainError>),
    #[error("scene {0:?} has no activity labels")]
    MissingLabels(String),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

impl From<TrainError> for EvalError {
    fn from(e: TrainError) -> Self {
        Self::Model(Box::new(e))
    }
}

fn check<P: AsRef<[RealPoint]>, Q: AsRef<[RealPoint]>>(pred: &[P], truth: &[Q]) -> Result<(), EvalError> {
    if pred.len() != truth.len() {
        return Err(EvalError::LengthMismatch(pred.len(), truth.len()));
    }
    for (p, t) in pred.iter().zip(truth) {
        let (p, t) = (p.as_ref(), t.as_ref());
        if p.len() != t.len() || p.is_empty() {
            return Err(EvalError::LengthMismatch(p.len(), t.len()));
        }
    }
    if pred.is_empty() {
        return Err(EvalError::EmptyTestSet);
    }
    Ok(())
}

fn sample_ade(p: &[RealPoint], t: &[RealPoint]) -> f64 {
    p.iter().zip(t).map(|(a, b)| a.distance(b)).sum::<f64>() / p.len() as f64
}

fn sample_fde(p: &[RealPoint], t: &[RealPoint]) -> f64 {
    p[p.len() - 1].distance(&t[t.len() - 1])
}

/// Mean point-wise L2 error over all samples and steps.
pub fn ade<P: AsRef<[RealPoint]>, Q: AsRef<[RealPoint]>>(predictions: &[P], truth: &[Q]) -> Result<f64, EvalError> {
    check(predictions, truth)?;
    let n: usize = truth.iter().map(|t| t.as_ref().len()).sum();
    let total: f64 = predictions
        .iter()
        .zip(truth)
        .flat_map(|(p, t)| p.as_ref().iter().zip(t.as_ref()).map(|(a, b)| a.distance(b)))
        .sum();
    Ok(total / n as f64)
}

/// Mean L2 error of the final point.
pub fn fde<P: AsRef<[RealPoint]>, Q: AsRef<[RealPoint]>>(predictions: &[P], truth: &[Q]) -> Result<f64, EvalError> {
    check(predictions, truth)?;
    let total: f64 = predictions
        .iter()
        .zip(truth)
        .map(|(p, t)| sample_fde(p.as_ref(), t.as_ref()))
        .sum();
    Ok(total / predictions.len() as f64)
}

/// `(minADE, minFDE)`: per sample the best candidate for each metric,
/// chosen independently, then averaged over samples.
pub fn best_of_k<P: AsRef<[RealPoint]>, Q: AsRef<[RealPoint]>>(
    candidates: &[Vec<P>],
    truth: &[Q],
) -> Result<(f64, f64), EvalError> {
    if candidates.len() != truth.len() {
        return Err(EvalError::LengthMismatch(candidates.len(), truth.len()));
    }
    if truth.is_empty() {
        return Err(EvalError::EmptyTestSet);
    }
    let (mut sum_ade, mut sum_fde) = (0.0, 0.0);
    for (i, (cands, t)) in candidates.iter().zip(truth).enumerate() {
        if cands.is_empty() {
            return Err(EvalError::EmptyCandidates(i));
        }
        let t = t.as_ref();
        check(cands, &vec![t; cands.len()])?;
        sum_ade += cands
            .iter()
            .map(|c| sample_ade(c.as_ref(), t))
            .fold(f64::INFINITY, f64::min);
        sum_fde += cands
            .iter()
            .map(|c| sample_fde(c.as_ref(), t))
            .fold(f64::INFINITY, f64::min);
    }
    let n = truth.len() as f64;
    Ok((sum_ade / n, sum_fde / n))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneMetrics {
    pub scene: String,
    pub ade: f64,
    pub fde: f64,
    pub n_samples: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub ade: f64,
    pub fde: f64,
    pub n_samples: usize,
    pub per_scene: Vec<SceneMetrics>,
}

impl MetricReport {
    /// Sample-weighted aggregate of per-scene results.
    pub fn from_scenes(per_scene: Vec<SceneMetrics>) -> Result<Self, EvalError> {
        let n: usize = per_scene.iter().map(|s| s.n_samples).sum();
        if n == 0 {
            return Err(EvalError::EmptyTestSet);
        }
        let w =
            |f: fn(&SceneMetrics) -> f64| per_scene.iter().map(|s| f(s) * s.n_samples as f64).sum::<f64>() / n as f64;
        Ok(Self {
            ade: w(|s| s.ade),
            fde: w(|s| s.fde),
            n_samples: n,
            per_scene,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }

    /// Aligned text table, one row per scene plus an overall row.
    pub fn to_text_table(&self) -> String {
        let width = self
            .per_scene
            .iter()
            .map(|s| s.scene.len())
            .chain(["scene".len(), "overall".len()])
            .max()
            .unwrap_or(5);
        let mut out = format!("{:<width$}  {:>10}  {:>10}  {:>8}\n", "scene", "ade", "fde", "samples");
        let row =
            |name: &str, ade: f64, fde: f64, n: usize| format!("{name:<width$}  {ade:>10.4}  {fde:>10.4}  {n:>8}\n");
        for s in &self.per_scene {
            out.push_str(&row(&s.scene, s.ade, s.fde, s.n_samples));
        }
        out.push_str(&row("overall", self.ade, self.fde, self.n_samples));
        out
    }
}

fn scene_metrics(scene: &SceneData, predictions: &[[RealPoint; PRED_LEN]]) -> Result<SceneMetrics, EvalError> {
    let truth: Vec<&[RealPoint]> = scene.samples.iter().map(|s| &s.future[..]).collect();
    Ok(SceneMetrics {
        scene: scene.name.clone(),
        ade: ade(predictions, &truth)?,
        fde: fde(predictions, &truth)?,
        n_samples: truth.len(),
    })
}

/// Runs the model over every sample of `scenes`. Without `stats` the
/// context is normalized per scene.
pub fn evaluate_scenes(
    model: &Model,
    store: &ParamStore,
    scenes: &[SceneData],
    stats: Option<&NormStats>,
) -> Result<MetricReport, EvalError> {
    let mut per_scene = Vec::new();
    for scene in scenes.iter().filter(|s| !s.samples.is_empty()) {
        let preds = model.predict_scene(store, scene, stats)?;
        per_scene.push(scene_metrics(scene, &preds)?);
    }
    MetricReport::from_scenes(per_scene)
}

/// Evaluates on the plan's held-out scene.
pub fn evaluate(
    model: &Model,
    store: &ParamStore,
    plan: &SplitPlan,
    scenes: &[SceneData],
    stats: Option<&NormStats>,
) -> Result<MetricReport, EvalError> {
    let test = scenes
        .iter()
        .find(|s| s.name == plan.test_scene)
        .ok_or_else(|| EvalError::UnknownScene(plan.test_scene.clone()))?;
    evaluate_scenes(model, store, std::slice::from_ref(test), stats)
}

/// Non-learned reference predictors.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Baseline {
    LinearPrior,
    /// Repeats the last observed position.
    LastObserved,
}

pub fn baseline_report(scenes: &[SceneData], baseline: Baseline) -> Result<MetricReport, EvalError> {
    let mut per_scene = Vec::new();
    for scene in scenes.iter().filter(|s| !s.samples.is_empty()) {
        let preds: Vec<[RealPoint; PRED_LEN]> = scene
            .samples
            .iter()
            .map(|s| match baseline {
                Baseline::LinearPrior => linear_prior_real(&s.observed),
                Baseline::LastObserved => [s.last_observed(); PRED_LEN],
            })
            .collect();
        per_scene.push(scene_metrics(scene, &preds)?);
    }
    MetricReport::from_scenes(per_scene)
}

/// Contexts fused from recorded activity labels and fixed social
/// parameters, normalized per scene. They do not depend on any trained
/// weights, so predictions of different models can be scored on them.
pub fn reference_contexts(scene: &SceneData, social: &SocialParams) -> Result<Vec<ContextImage>, EvalError> {
    let labels = scene
        .labels
        .as_ref()
        .ok_or_else(|| EvalError::MissingLabels(scene.name.clone()))?;
    let energies = scene
        .samples
        .iter()
        .map(|s| Ok(social_energy(s, social, &scene.geometry)?.values))
        .collect::<Result<Vec<_>, EvalError>>()?;
    let stats = NormStats::from_grids([labels], energies.iter());
    Ok(energies
        .iter()
        .map(|e| fuse(labels, e, &stats).expect("labels share the grid shape"))
        .collect())
}

/// Mean context value under every predicted point, one context per sample.
pub fn mean_context_value(
    scene: &SceneData,
    contexts: &[ContextImage],
    predictions: &[[RealPoint; PRED_LEN]],
) -> Result<f64, EvalError> {
    if contexts.len() != predictions.len() {
        return Err(EvalError::LengthMismatch(contexts.len(), predictions.len()));
    }
    if predictions.is_empty() {
        return Err(EvalError::EmptyTestSet);
    }
    let mut acc = 0.0;
    for (c, pred) in contexts.iter().zip(predictions) {
        for p in pred {
            let (gx, gy) = scene.geometry.real_to_continuous(*p)?;
            acc += c.sample_at(gx, gy);
        }
    }
    Ok(acc / (predictions.len() * PRED_LEN) as f64)
}
