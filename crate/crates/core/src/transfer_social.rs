//! Social transfer: a linear prior predictor seats base-energy kernels on
//! the future paths of the target and its neighbors, giving an interaction
//! energy map per target.
//!
//! All energy evaluations happen in grid units. Cell `(gx, gy)` has its
//! center at the integer coordinate `(gx, gy)`, and prior points are the
//! integer indices of the cells they fall in.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::datasets::{TrajectorySample, OBS_LEN, PRED_LEN};
use crate::geometry::{GeometryError, GridIndex, RealPoint, SceneGeometry};
use crate::grid::{save_grid, Grid, GridError, GridSidecar};
use crate::neural::{Graph, ParamStore, Tensor, Var};

pub const DEFAULT_LAMBDA: [f64; 3] = [0.4, 0.4, 0.2];
pub const DEFAULT_BANDWIDTH: f64 = 2.0;
/// Store name of the three log-bandwidths.
pub const LOG_H_PARAM: &str = "social.log_h";
/// Motion vectors shorter than this count as stationary.
pub const STATIONARY_EPS: f64 = 1e-8;

/// Least-squares line fit of x(t) and y(t) over t = 1..8, extrapolated to
/// t = 9..20.
pub fn linear_prior_real(observed: &[RealPoint; OBS_LEN]) -> [RealPoint; PRED_LEN] {
    let n = OBS_LEN as f64;
    let t_mean = (1..=OBS_LEN).map(|t| t as f64).sum::<f64>() / n;
    let x_mean = observed.iter().map(|p| p.x).sum::<f64>() / n;
    let y_mean = observed.iter().map(|p| p.y).sum::<f64>() / n;
    let (mut sxx, mut sx, mut sy) = (0.0, 0.0, 0.0);
    for (i, p) in observed.iter().enumerate() {
        let dt = (i + 1) as f64 - t_mean;
        sxx += dt * dt;
        sx += dt * (p.x - x_mean);
        sy += dt * (p.y - y_mean);
    }
    let (bx, by) = (sx / sxx, sy / sxx);
    std::array::from_fn(|k| {
        let dt = (OBS_LEN + 1 + k) as f64 - t_mean;
        RealPoint::new(x_mean + bx * dt, y_mean + by * dt)
    })
}

/// The prior's 12 future points as grid cells.
pub fn linear_prior(
    observed: &[RealPoint; OBS_LEN],
    geometry: &SceneGeometry,
) -> Result<[GridIndex; PRED_LEN], GeometryError> {
    let real = linear_prior_real(observed);
    let mut out = [GridIndex::default(); PRED_LEN];
    for (o, p) in out.iter_mut().zip(real) {
        *o = geometry.real_to_grid(p)?;
    }
    Ok(out)
}

/// `max(1 - sqrt(x^2 + y^2), 0)`.
pub fn base_energy(x: f64, y: f64) -> f64 {
    (1.0 - x.hypot(y)).max(0.0)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MotionVector {
    pub dx: f64,
    pub dy: f64,
}

impl MotionVector {
    pub fn new(dx: f64, dy: f64) -> Self {
        Self { dx, dy }
    }

    /// Displacement from the first to the last observed position.
    pub fn of(observed: &[RealPoint; OBS_LEN]) -> Self {
        let (a, b) = (observed[0], observed[OBS_LEN - 1]);
        Self::new(b.x - a.x, b.y - a.y)
    }

    pub fn norm_sq(&self) -> f64 {
        self.dx * self.dx + self.dy * self.dy
    }
}

/// `dot(vi, vj) / |vj|^2`, or 0 for a stationary neighbor.
pub fn relative_gain(vi: MotionVector, vj: MotionVector) -> f64 {
    let n2 = vj.norm_sq();
    if n2.sqrt() < STATIONARY_EPS {
        return 0.0;
    }
    (vi.dx * vj.dx + vi.dy * vj.dy) / n2
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SocialParams {
    /// Natural logs of the bandwidths h1, h2, h3 in grid units.
    pub log_h: [f64; 3],
    pub lambda: [f64; 3],
}

impl Default for SocialParams {
    fn default() -> Self {
        Self::new([DEFAULT_BANDWIDTH; 3], DEFAULT_LAMBDA)
    }
}

impl SocialParams {
    pub fn new(h: [f64; 3], lambda: [f64; 3]) -> Self {
        Self {
            log_h: h.map(f64::ln),
            lambda,
        }
    }

    pub fn bandwidths(&self) -> [f64; 3] {
        self.log_h.map(f64::exp)
    }

    /// Reads the log-bandwidths from `store`, keeping `lambda`.
    pub fn from_store(store: &ParamStore, lambda: [f64; 3]) -> Option<Self> {
        let t = store.get(LOG_H_PARAM)?;
        Some(Self {
            log_h: [t.data[0], t.data[1], t.data[2]],
            lambda,
        })
    }

    pub fn write_to_store(&self, store: &mut ParamStore) {
        store.insert(LOG_H_PARAM, Tensor::new(vec![3], self.log_h.to_vec()));
    }
}

/// A weighted kernel center in grid units.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Source {
    pub gx: f64,
    pub gy: f64,
    pub weight: f64,
}

/// Kernel centers for the self, cross and etiquette terms.
///
/// The self term carries weight -1 on each prior point of the target, the
/// cross term -theta_ij on each prior point of neighbor j, and the etiquette
/// term +1 on each prior point of every neighbor.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct EnergySources {
    pub terms: [Vec<Source>; 3],
}

impl EnergySources {
    pub fn for_sample(sample: &TrajectorySample, geometry: &SceneGeometry) -> Result<Self, GeometryError> {
        let cell = |g: GridIndex, weight: f64| Source {
            gx: g.gx as f64,
            gy: g.gy as f64,
            weight,
        };
        let mut out = Self::default();
        for g in linear_prior(&sample.observed, geometry)? {
            out.terms[0].push(cell(g, -1.0));
        }
        let vi = MotionVector::of(&sample.observed);
        let mut neighbors: Vec<_> = sample.neighbors.iter().collect();
        neighbors.sort_by_key(|n| n.agent_id);
        for n in neighbors {
            let theta = relative_gain(vi, MotionVector::of(&n.observed));
            for g in linear_prior(&n.observed, geometry)? {
                out.terms[1].push(cell(g, -theta));
                out.terms[2].push(cell(g, 1.0));
            }
        }
        Ok(out)
    }
}

/// Interaction energy map with its three unweighted components.
#[derive(Clone, Debug, PartialEq)]
pub struct EnergyMap {
    pub values: Grid,
    /// Self, cross and etiquette sums before the lambda weights.
    pub components: [Grid; 3],
}

pub const COMPONENT_NAMES: [&str; 3] = ["self", "cross", "etiquette"];

impl EnergyMap {
    pub fn shape(&self) -> (usize, usize) {
        self.values.shape()
    }

    /// Writes the map like an activity grid, plus `<stem>.components.f32`
    /// holding the three components stacked along rows.
    pub fn save(&self, stem: &Path, scene: &str) -> Result<(), GridError> {
        let (rows, cols) = self.shape();
        save_grid(
            stem,
            &self.values,
            &GridSidecar {
                rows,
                cols,
                h: None,
                scene: scene.to_owned(),
                components: COMPONENT_NAMES.iter().map(|s| s.to_string()).collect(),
            },
        )?;
        let stacked: Vec<f64> = self.components.iter().flat_map(|c| c.data().iter().copied()).collect();
        let mut path = stem.as_os_str().to_owned();
        path.push(".components.f32");
        Grid::from_vec(3 * rows, cols, stacked)?.write_f32_le(Path::new(&path))
    }
}

/// One term's kernel sum and its derivative w.r.t. `log h`.
fn term_map(sources: &[Source], h: f64, rows: usize, cols: usize) -> (Vec<f64>, Vec<f64>) {
    let mut value = vec![0.0; rows * cols];
    let mut dlog = vec![0.0; rows * cols];
    let reach = h.ceil() as i64;
    for s in sources {
        let (cx, cy) = (s.gx.round() as i64, s.gy.round() as i64);
        let y_lo = (cy - reach).max(0);
        let y_hi = (cy + reach).min(rows as i64 - 1);
        let x_lo = (cx - reach).max(0);
        let x_hi = (cx + reach).min(cols as i64 - 1);
        for y in y_lo..=y_hi {
            for x in x_lo..=x_hi {
                let r = (x as f64 - s.gx).hypot(y as f64 - s.gy) / h;
                if r < 1.0 {
                    let i = y as usize * cols + x as usize;
                    value[i] += s.weight * (1.0 - r);
                    // d/dlog h of (1 - d/h) is d/h
                    dlog[i] += s.weight * r;
                }
            }
        }
    }
    (value, dlog)
}

pub fn energy_from_sources(sources: &EnergySources, params: &SocialParams, rows: usize, cols: usize) -> EnergyMap {
    let h = params.bandwidths();
    let comps: Vec<Vec<f64>> = (0..3)
        .map(|k| term_map(&sources.terms[k], h[k], rows, cols).0)
        .collect();
    let values: Vec<f64> = (0..rows * cols)
        .map(|i| (0..3).map(|k| params.lambda[k] * comps[k][i]).sum())
        .collect();
    let grid = |v: Vec<f64>| Grid::from_vec(rows, cols, v).expect("length matches shape");
    let mut comps = comps.into_iter().map(grid);
    EnergyMap {
        values: grid(values),
        components: std::array::from_fn(|_| comps.next().expect("three components")),
    }
}

/// Energy map for one target over the scene's grid.
pub fn social_energy(
    sample: &TrajectorySample,
    params: &SocialParams,
    geometry: &SceneGeometry,
) -> Result<EnergyMap, GeometryError> {
    let sources = EnergySources::for_sample(sample, geometry)?;
    Ok(energy_from_sources(
        &sources,
        params,
        geometry.grid.rows,
        geometry.grid.cols,
    ))
}

/// Records the energy map as a `[rows, cols]` graph node differentiable
/// w.r.t. `log_h` (shape `[3]`).
pub fn energy_node(
    g: &mut Graph,
    log_h: Var,
    sources: &EnergySources,
    lambda: [f64; 3],
    rows: usize,
    cols: usize,
) -> Var {
    let lh = g.value(log_h);
    let h = [lh[0].exp(), lh[1].exp(), lh[2].exp()];
    let mut value = vec![0.0; rows * cols];
    let mut dlogs = Vec::with_capacity(3);
    for k in 0..3 {
        let (v, d) = term_map(&sources.terms[k], h[k], rows, cols);
        for (o, x) in value.iter_mut().zip(&v) {
            *o += lambda[k] * x;
        }
        dlogs.push(d);
    }
    g.custom(
        &[log_h],
        vec![rows, cols],
        value,
        Box::new(move |c| {
            let grad: Vec<f64> = (0..3)
                .map(|k| lambda[k] * c.grad.iter().zip(&dlogs[k]).map(|(a, b)| a * b).sum::<f64>())
                .collect();
            vec![Some(grad)]
        }),
    )
}
