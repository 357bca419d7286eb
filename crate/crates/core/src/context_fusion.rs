//! Fusion of the predicted activity grid and an energy map into a context
//! image, bilinear context lookup, and heatmap rendering.

use std::path::Path;

use image::{Rgb, RgbImage};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datasets::{SampleId, TrajectorySample};
use crate::geometry::{GeometryError, RealPoint, SceneGeometry};
use crate::grid::Grid;
use crate::neural::bilinear;

#[derive(Debug, Error)]
pub enum FusionError {
    #[error("shape mismatch: {a:?} vs {b:?}")]
    ShapeMismatch { a: (usize, usize), b: (usize, usize) },
    #[error("cannot render a grid with non-finite values")]
    NonFinite,
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error("writing {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: image::ImageError,
    },
}

/// Whether normalization bounds come from the current batch or from
/// statistics frozen at the end of training.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StatsMode {
    #[default]
    Batch,
    TrainFrozen,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub t_min: f64,
    pub t_max: f64,
    pub e_min: f64,
    pub e_max: f64,
}

impl NormStats {
    /// Bounds over every cell of every grid given. Empty `activity`
    /// yields a degenerate `[0, 0]` physical range.
    pub fn from_grids<'a>(
        activity: impl IntoIterator<Item = &'a Grid>,
        energy: impl IntoIterator<Item = &'a Grid>,
    ) -> Self {
        let (t_min, t_max) = bounds(activity);
        let (e_min, e_max) = bounds(energy);
        Self {
            t_min,
            t_max,
            e_min,
            e_max,
        }
    }
}

fn bounds<'a>(grids: impl IntoIterator<Item = &'a Grid>) -> (f64, f64) {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for g in grids {
        lo = lo.min(g.min());
        hi = hi.max(g.max());
    }
    if lo > hi {
        (0.0, 0.0)
    } else {
        (lo, hi)
    }
}

/// `(v - lo) / (hi - lo)`, or 0 when the range is degenerate.
pub fn normalized(v: f64, lo: f64, hi: f64) -> f64 {
    if hi == lo {
        0.0
    } else {
        (v - lo) / (hi - lo)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ContextImage {
    pub values: Grid,
    pub sample: Option<SampleId>,
}

impl ContextImage {
    pub fn new(values: Grid) -> Self {
        Self { values, sample: None }
    }

    /// Bilinear lookup at continuous grid coordinates, clamped to the grid.
    pub fn sample_at(&self, gx: f64, gy: f64) -> f64 {
        sample_context(&self.values, gx, gy)
    }
}

/// `C = 1 - norm(T) + norm(E)`.
pub fn fuse(activity: &Grid, energy: &Grid, stats: &NormStats) -> Result<ContextImage, FusionError> {
    if activity.shape() != energy.shape() {
        return Err(FusionError::ShapeMismatch {
            a: activity.shape(),
            b: energy.shape(),
        });
    }
    let data = activity
        .data()
        .iter()
        .zip(energy.data())
        .map(|(&t, &e)| 1.0 - normalized(t, stats.t_min, stats.t_max) + normalized(e, stats.e_min, stats.e_max))
        .collect();
    let (rows, cols) = energy.shape();
    Ok(ContextImage::new(
        Grid::from_vec(rows, cols, data).expect("shape checked"),
    ))
}

/// Fusion with the physical term dropped: `C = 1 + norm(E)`.
pub fn fuse_social_only(energy: &Grid, stats: &NormStats) -> ContextImage {
    let data = energy
        .data()
        .iter()
        .map(|&e| 1.0 + normalized(e, stats.e_min, stats.e_max))
        .collect();
    let (rows, cols) = energy.shape();
    ContextImage::new(Grid::from_vec(rows, cols, data).expect("same shape"))
}

pub fn sample_context(c: &Grid, gx: f64, gy: f64) -> f64 {
    bilinear(c.data(), c.rows(), c.cols(), gx, gy)
}

// ----- rendering -----

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Palette {
    #[default]
    Viridis,
    Gray,
}

const VIRIDIS: [[u8; 3]; 5] = [
    [68, 1, 84],
    [59, 82, 139],
    [33, 145, 140],
    [94, 201, 98],
    [253, 231, 37],
];

impl Palette {
    /// Color for `t` in `[0, 1]`; 0 is cold and 1 is hot.
    pub fn color(self, t: f64) -> [u8; 3] {
        let t = if t.is_finite() { t.clamp(0.0, 1.0) } else { 0.0 };
        match self {
            Palette::Gray => {
                let v = (t * 255.0).round() as u8;
                [v, v, v]
            }
            Palette::Viridis => {
                let x = t * (VIRIDIS.len() - 1) as f64;
                let i = (x.floor() as usize).min(VIRIDIS.len() - 2);
                let f = x - i as f64;
                std::array::from_fn(|c| {
                    let (a, b) = (VIRIDIS[i][c] as f64, VIRIDIS[i + 1][c] as f64);
                    (a + (b - a) * f).round() as u8
                })
            }
        }
    }
}

pub const UPSCALE: u32 = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stroke {
    Solid,
    Dashed,
    Markers,
}

/// A polyline in image pixel coordinates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Polyline {
    pub stroke: Stroke,
    pub color: [u8; 3],
    pub vertices: Vec<(f64, f64)>,
}

/// Everything drawn on top of a heatmap.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DrawList {
    pub lines: Vec<Polyline>,
}

impl DrawList {
    pub fn vertex_count(&self) -> usize {
        self.lines.iter().map(|l| l.vertices.len()).sum()
    }

    fn push(
        &mut self,
        geometry: &SceneGeometry,
        points: &[RealPoint],
        stroke: Stroke,
        color: [u8; 3],
    ) -> Result<(), GeometryError> {
        let mut vertices = Vec::with_capacity(points.len());
        for p in points {
            let (gx, gy) = geometry.real_to_continuous(*p)?;
            let s = UPSCALE as f64;
            vertices.push(((gx + 0.5) * s, (gy + 0.5) * s));
        }
        self.lines.push(Polyline {
            stroke,
            color,
            vertices,
        });
        Ok(())
    }

    /// Observed path solid, ground truth dashed, predictions as markers.
    pub fn for_sample(
        sample: &TrajectorySample,
        predicted: Option<&[RealPoint]>,
        geometry: &SceneGeometry,
    ) -> Result<Self, GeometryError> {
        let mut d = DrawList::default();
        d.push(geometry, &sample.observed, Stroke::Solid, [255, 255, 255])?;
        d.push(geometry, &sample.future, Stroke::Dashed, [255, 160, 0])?;
        if let Some(p) = predicted {
            d.push(geometry, p, Stroke::Markers, [230, 20, 20])?;
        }
        Ok(d)
    }
}

/// Heatmap image of `grid`, upscaled by [`UPSCALE`], with min mapped to the
/// cold end of the palette.
pub fn heatmap_image(grid: &Grid, palette: Palette, overlay: Option<&DrawList>) -> Result<RgbImage, FusionError> {
    if !grid.is_finite() {
        return Err(FusionError::NonFinite);
    }
    let (lo, hi) = (grid.min(), grid.max());
    let (rows, cols) = grid.shape();
    let mut img = RgbImage::new(cols as u32 * UPSCALE, rows as u32 * UPSCALE);
    for (x, y, px) in img.enumerate_pixels_mut() {
        let v = grid.get((x / UPSCALE) as usize, (y / UPSCALE) as usize);
        *px = Rgb(palette.color(normalized(v, lo, hi)));
    }
    if let Some(d) = overlay {
        for line in &d.lines {
            draw_polyline(&mut img, line);
        }
    }
    Ok(img)
}

pub fn render_heatmap(
    grid: &Grid,
    palette: Palette,
    overlay: Option<&DrawList>,
    path: &Path,
) -> Result<(), FusionError> {
    heatmap_image(grid, palette, overlay)?
        .save(path)
        .map_err(|source| FusionError::Io {
            path: path.display().to_string(),
            source,
        })
}

fn put(img: &mut RgbImage, x: f64, y: f64, color: [u8; 3]) {
    let (xi, yi) = (x.round(), y.round());
    if xi >= 0.0 && yi >= 0.0 && (xi as u32) < img.width() && (yi as u32) < img.height() {
        img.put_pixel(xi as u32, yi as u32, Rgb(color));
    }
}

fn draw_polyline(img: &mut RgbImage, line: &Polyline) {
    match line.stroke {
        Stroke::Markers => {
            for &(x, y) in &line.vertices {
                for d in -2..=2 {
                    put(img, x + d as f64, y + d as f64, line.color);
                    put(img, x + d as f64, y - d as f64, line.color);
                }
            }
        }
        Stroke::Solid | Stroke::Dashed => {
            let mut travelled = 0usize;
            for w in line.vertices.windows(2) {
                let ((x0, y0), (x1, y1)) = (w[0], w[1]);
                let steps = (x1 - x0).abs().max((y1 - y0).abs()).ceil().max(1.0) as usize;
                for s in 0..=steps {
                    let f = s as f64 / steps as f64;
                    let on = line.stroke == Stroke::Solid || (travelled / 3) % 2 == 0;
                    if on {
                        put(img, x0 + (x1 - x0) * f, y0 + (y1 - y0) * f, line.color);
                    }
                    travelled += 1;
                }
            }
        }
    }
}
