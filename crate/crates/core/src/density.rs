//! Kernel density of recorded positions and its per-cell integrals, used
//! as activity labels for the physical transfer.
//!
//! The density follows
//!
//! ```text
//! p(q) = 1 / (R h^2) * sum_i K((q - p_i) / h)
//! K(x, y) = max(1/h - sqrt(x^2 + y^2) / h^2, 0)
//! ```
//!
//! taken literally: since the kernel already carries `1/h` factors and the
//! arguments are pre-scaled by `h`, the effective support radius is `h^2`
//! pixels and the total mass is `pi * h / 3` rather than one.
//! [`KernelMode::Normalized`] switches to a unit-mass cone kernel instead.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datasets::Scene;
use crate::geometry::{GeometryError, GridSpec, Homography, PixelPoint, RealPoint, SceneGeometry};
use crate::grid::{Grid, GridError};

#[derive(Debug, Error)]
pub enum DensityError {
    #[error("density field needs at least one sample")]
    NoSamples,
    #[error("bandwidth must be positive and finite, got {0}")]
    BadBandwidth(f64),
    #[error("subsample count must be at least 1")]
    BadSubsamples,
    #[error("activity labels must be non-negative and finite")]
    NegativeLabel,
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KernelMode {
    #[default]
    Literal,
    Normalized,
}

impl KernelMode {
    /// Radius in pixels beyond which a single sample contributes nothing.
    pub fn support_radius(self, h: f64) -> f64 {
        match self {
            KernelMode::Literal => h * h,
            KernelMode::Normalized => h,
        }
    }

    /// Integral of the density over the plane.
    pub fn total_mass(self, h: f64) -> f64 {
        match self {
            KernelMode::Literal => std::f64::consts::PI * h / 3.0,
            KernelMode::Normalized => 1.0,
        }
    }
}

/// `max(1/h - r/h^2, 0)`.
pub fn kernel(x: f64, y: f64, h: f64) -> f64 {
    (1.0 / h - x.hypot(y) / (h * h)).max(0.0)
}

/// Cone kernel `3/pi * max(1 - r, 0)`, unit mass over the plane.
pub fn normalized_kernel(x: f64, y: f64) -> f64 {
    3.0 / std::f64::consts::PI * (1.0 - x.hypot(y)).max(0.0)
}

#[derive(Clone, Debug)]
pub struct DensityField {
    samples: Vec<PixelPoint>,
    bandwidth: f64,
    mode: KernelMode,
    bucket: f64,
    buckets: HashMap<(i64, i64), Vec<usize>>,
}

impl DensityField {
    pub fn new(samples: Vec<PixelPoint>, bandwidth: f64, mode: KernelMode) -> Result<Self, DensityError> {
        if samples.is_empty() {
            return Err(DensityError::NoSamples);
        }
        if !(bandwidth.is_finite() && bandwidth > 0.0) {
            return Err(DensityError::BadBandwidth(bandwidth));
        }
        let bucket = mode.support_radius(bandwidth);
        let mut buckets: HashMap<(i64, i64), Vec<usize>> = HashMap::new();
        for (i, p) in samples.iter().enumerate() {
            buckets.entry(bucket_of(p.px, p.py, bucket)).or_default().push(i);
        }
        Ok(Self {
            samples,
            bandwidth,
            mode,
            bucket,
            buckets,
        })
    }

    pub fn samples(&self) -> &[PixelPoint] {
        &self.samples
    }

    pub fn bandwidth(&self) -> f64 {
        self.bandwidth
    }

    pub fn mode(&self) -> KernelMode {
        self.mode
    }

    fn term(&self, dx: f64, dy: f64) -> f64 {
        let h = self.bandwidth;
        match self.mode {
            KernelMode::Literal => kernel(dx / h, dy / h, h),
            KernelMode::Normalized => normalized_kernel(dx / h, dy / h),
        }
    }

    /// Density at `q`. Only samples in neighboring buckets are visited;
    /// everything further away lies outside the kernel support.
    pub fn density_at(&self, q: PixelPoint) -> f64 {
        let (bx, by) = bucket_of(q.px, q.py, self.bucket);
        let mut acc = 0.0;
        for ny in by - 1..=by + 1 {
            for nx in bx - 1..=bx + 1 {
                if let Some(ids) = self.buckets.get(&(nx, ny)) {
                    for &i in ids {
                        let p = self.samples[i];
                        acc += self.term(q.px - p.px, q.py - p.py);
                    }
                }
            }
        }
        acc / (self.samples.len() as f64 * self.bandwidth * self.bandwidth)
    }

    /// Brute-force density over all samples.
    pub fn density_at_exhaustive(&self, q: PixelPoint) -> f64 {
        let acc: f64 = self.samples.iter().map(|p| self.term(q.px - p.px, q.py - p.py)).sum();
        acc / (self.samples.len() as f64 * self.bandwidth * self.bandwidth)
    }
}

fn bucket_of(x: f64, y: f64, size: f64) -> (i64, i64) {
    ((x / size).floor() as i64, (y / size).floor() as i64)
}

/// Per-cell activity labels, non-negative.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActivityGrid(Grid);

impl ActivityGrid {
    pub fn new(grid: Grid) -> Result<Self, DensityError> {
        if grid.data().iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(DensityError::NegativeLabel);
        }
        Ok(Self(grid))
    }

    pub fn grid(&self) -> &Grid {
        &self.0
    }

    pub fn into_grid(self) -> Grid {
        self.0
    }

    pub fn shape(&self) -> (usize, usize) {
        self.0.shape()
    }
}

pub const DEFAULT_SUBSAMPLES: usize = 4;

/// Integrates the density over every cell with the midpoint rule on an
/// `subsamples x subsamples` lattice per cell.
pub fn grid_labels(field: &DensityField, spec: &GridSpec, subsamples: usize) -> Result<ActivityGrid, DensityError> {
    if subsamples == 0 {
        return Err(DensityError::BadSubsamples);
    }
    let (cw, ch) = (spec.cell_width(), spec.cell_height());
    let (sw, sh) = (cw / subsamples as f64, ch / subsamples as f64);
    let area = sw * sh;
    let mut grid = Grid::zeros(spec.rows, spec.cols);
    for gy in 0..spec.rows {
        for gx in 0..spec.cols {
            let mut acc = 0.0;
            for sy in 0..subsamples {
                for sx in 0..subsamples {
                    let q = PixelPoint::new(
                        gx as f64 * cw + (sx as f64 + 0.5) * sw,
                        gy as f64 * ch + (sy as f64 + 0.5) * sh,
                    );
                    acc += field.density_at(q);
                }
            }
            grid.set(gx, gy, acc * area);
        }
    }
    ActivityGrid::new(grid)
}

/// Converts a bandwidth in scene units to pixels using the local scale of
/// `homography` at `at`.
pub fn bandwidth_in_pixels(h: f64, homography: &Homography, at: RealPoint) -> Result<f64, DensityError> {
    let j = homography.jacobian(at)?;
    let det = (j[0][0] * j[1][1] - j[0][1] * j[1][0]).abs();
    Ok(h * det.sqrt())
}

/// Activity labels from every annotated position of `scene`.
pub fn scene_labels(
    scene: &Scene,
    geometry: &SceneGeometry,
    h_pixels: f64,
    mode: KernelMode,
    subsamples: usize,
) -> Result<ActivityGrid, DensityError> {
    let samples = scene
        .all_points()
        .map(|tp| geometry.homography.real_to_pixel(tp.pos))
        .collect::<Result<Vec<_>, _>>()?;
    let field = DensityField::new(samples, h_pixels, mode)?;
    grid_labels(&field, &geometry.grid, subsamples)
}
