//! Coordinate frames and the maps between them.
//!
//! Three frames are in play:
//!
//! * scene coordinates ([`RealPoint`]), meters for metric datasets and raw
//!   pixels for pixel-annotated ones,
//! * image pixels ([`PixelPoint`]),
//! * grid cells ([`GridIndex`]) over an `H x W` partition of the image.
//!
//! A [`Homography`] carries scene coordinates to pixels and a [`GridSpec`]
//! quantizes pixels into cells. [`SceneGeometry`] bundles the two.

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum GeometryError {
    #[error("degenerate projection: homogeneous coordinate {0:e} is too close to zero")]
    DegenerateProjection(f64),
    #[error("homography is singular (|det| = {0:e})")]
    Singular(f64),
    #[error("grid index ({gx}, {gy}) outside {cols}x{rows} grid")]
    OutOfBounds {
        gx: usize,
        gy: usize,
        cols: usize,
        rows: usize,
    },
    #[error("invalid grid spec: {0}")]
    InvalidGrid(String),
    #[error("malformed homography file: {0}")]
    Parse(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Minimum `|det|` accepted for a homography.
pub const MIN_DETERMINANT: f64 = 1e-9;
/// Projections whose homogeneous coordinate is smaller than this fail.
pub const MIN_HOMOGENEOUS_W: f64 = 1e-12;

/// A position in scene units.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RealPoint {
    pub x: f64,
    pub y: f64,
}

impl RealPoint {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn distance(&self, other: &RealPoint) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }
}

/// A position in image pixels. May lie outside the image.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PixelPoint {
    pub px: f64,
    pub py: f64,
}

impl PixelPoint {
    pub const fn new(px: f64, py: f64) -> Self {
        Self { px, py }
    }
}

/// A cell of the grid: `gx` is the column, `gy` the row.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct GridIndex {
    pub gx: usize,
    pub gy: usize,
}

impl GridIndex {
    pub const fn new(gx: usize, gy: usize) -> Self {
        Self { gx, gy }
    }
}

/// Projective map from scene coordinates to pixels.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Homography {
    m: [[f64; 3]; 3],
}

impl Homography {
    pub fn new(m: [[f64; 3]; 3]) -> Result<Self, GeometryError> {
        let det = det3(&m);
        if !det.is_finite() || det.abs() <= MIN_DETERMINANT {
            return Err(GeometryError::Singular(det));
        }
        Ok(Self { m })
    }

    pub fn identity() -> Self {
        Self {
            m: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
        }
    }

    /// Axis-aligned affine map sending the box `[min, max]` onto
    /// `[0, width] x [0, height]` pixels.
    pub fn fit_affine(min: RealPoint, max: RealPoint, width: f64, height: f64) -> Result<Self, GeometryError> {
        let span_x = max.x - min.x;
        let span_y = max.y - min.y;
        if !(span_x > 0.0 && span_y > 0.0) {
            return Err(GeometryError::Singular(span_x * span_y));
        }
        let sx = width / span_x;
        let sy = height / span_y;
        Self::new([[sx, 0.0, -sx * min.x], [0.0, sy, -sy * min.y], [0.0, 0.0, 1.0]])
    }

    pub fn matrix(&self) -> &[[f64; 3]; 3] {
        &self.m
    }

    /// Applies the projective transform `[px', py', w] = M [x, y, 1]` and
    /// returns `(px'/w, py'/w)`.
    pub fn real_to_pixel(&self, p: RealPoint) -> Result<PixelPoint, GeometryError> {
        let m = &self.m;
        let u = m[0][0] * p.x + m[0][1] * p.y + m[0][2];
        let v = m[1][0] * p.x + m[1][1] * p.y + m[1][2];
        let w = m[2][0] * p.x + m[2][1] * p.y + m[2][2];
        if w.abs() < MIN_HOMOGENEOUS_W {
            return Err(GeometryError::DegenerateProjection(w));
        }
        Ok(PixelPoint::new(u / w, v / w))
    }

    /// Jacobian of [`Homography::real_to_pixel`] at `p`, rows `(px, py)`,
    /// columns `(x, y)`.
    pub fn jacobian(&self, p: RealPoint) -> Result<[[f64; 2]; 2], GeometryError> {
        let m = &self.m;
        let u = m[0][0] * p.x + m[0][1] * p.y + m[0][2];
        let v = m[1][0] * p.x + m[1][1] * p.y + m[1][2];
        let w = m[2][0] * p.x + m[2][1] * p.y + m[2][2];
        if w.abs() < MIN_HOMOGENEOUS_W {
            return Err(GeometryError::DegenerateProjection(w));
        }
        let w2 = w * w;
        Ok([
            [(m[0][0] * w - u * m[2][0]) / w2, (m[0][1] * w - u * m[2][1]) / w2],
            [(m[1][0] * w - v * m[2][0]) / w2, (m[1][1] * w - v * m[2][1]) / w2],
        ])
    }

    /// Parses three lines of three whitespace-separated decimals.
    pub fn parse(text: &str) -> Result<Self, GeometryError> {
        let rows: Vec<&str> = text.lines().map(str::trim).filter(|l| !l.is_empty()).collect();
        if rows.len() != 3 {
            return Err(GeometryError::Parse(format!("expected 3 rows, found {}", rows.len())));
        }
        let mut m = [[0.0; 3]; 3];
        for (r, line) in rows.iter().enumerate() {
            let vals: Vec<&str> = line.split_whitespace().collect();
            if vals.len() != 3 {
                return Err(GeometryError::Parse(format!(
                    "row {} has {} entries",
                    r + 1,
                    vals.len()
                )));
            }
            for (c, v) in vals.iter().enumerate() {
                m[r][c] = v
                    .parse()
                    .map_err(|_| GeometryError::Parse(format!("bad number {v:?}")))?;
            }
        }
        Self::new(m)
    }

    pub fn load(path: &Path) -> Result<Self, GeometryError> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<(), GeometryError> {
        std::fs::write(path, self.to_string())?;
        Ok(())
    }
}

impl fmt::Display for Homography {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for row in &self.m {
            writeln!(f, "{:?} {:?} {:?}", row[0], row[1], row[2])?;
        }
        Ok(())
    }
}

fn det3(m: &[[f64; 3]; 3]) -> f64 {
    m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
}

/// An `rows x cols` partition of a `pixel_width x pixel_height` image.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub rows: usize,
    pub cols: usize,
    pub pixel_width: f64,
    pub pixel_height: f64,
}

impl GridSpec {
    pub const DEFAULT_ROWS: usize = 100;
    pub const DEFAULT_COLS: usize = 100;

    pub fn new(rows: usize, cols: usize, pixel_width: f64, pixel_height: f64) -> Result<Self, GeometryError> {
        if rows == 0 || cols == 0 {
            return Err(GeometryError::InvalidGrid(format!(
                "grid must have at least one cell, got {rows}x{cols}"
            )));
        }
        if !(pixel_width > 0.0 && pixel_height > 0.0) {
            return Err(GeometryError::InvalidGrid(format!(
                "pixel extent must be positive, got {pixel_width}x{pixel_height}"
            )));
        }
        Ok(Self {
            rows,
            cols,
            pixel_width,
            pixel_height,
        })
    }

    /// Default 100x100 grid over the given image extent.
    pub fn with_extent(pixel_width: f64, pixel_height: f64) -> Result<Self, GeometryError> {
        Self::new(Self::DEFAULT_ROWS, Self::DEFAULT_COLS, pixel_width, pixel_height)
    }

    pub fn cell_width(&self) -> f64 {
        self.pixel_width / self.cols as f64
    }

    pub fn cell_height(&self) -> f64 {
        self.pixel_height / self.rows as f64
    }

    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Quantizes a pixel into its cell. Cells are half-open and points
    /// beyond the extent clamp to the boundary cells.
    pub fn pixel_to_grid(&self, p: PixelPoint) -> GridIndex {
        GridIndex {
            gx: quantize(p.px, self.cell_width(), self.cols),
            gy: quantize(p.py, self.cell_height(), self.rows),
        }
    }

    /// Continuous grid coordinates, scaled so that the center of cell
    /// `(gx, gy)` maps to exactly `(gx, gy)`.
    pub fn pixel_to_continuous(&self, p: PixelPoint) -> (f64, f64) {
        (p.px / self.cell_width() - 0.5, p.py / self.cell_height() - 0.5)
    }

    pub fn cell_center(&self, g: GridIndex) -> Result<PixelPoint, GeometryError> {
        if g.gx >= self.cols || g.gy >= self.rows {
            return Err(GeometryError::OutOfBounds {
                gx: g.gx,
                gy: g.gy,
                cols: self.cols,
                rows: self.rows,
            });
        }
        Ok(PixelPoint::new(
            (g.gx as f64 + 0.5) * self.cell_width(),
            (g.gy as f64 + 0.5) * self.cell_height(),
        ))
    }
}

fn quantize(v: f64, cell: f64, n: usize) -> usize {
    let idx = (v / cell).floor();
    if idx.is_nan() || idx < 0.0 {
        0
    } else if idx >= (n - 1) as f64 {
        n - 1
    } else {
        idx as usize
    }
}

/// Scene-to-grid pipeline for one scene.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneGeometry {
    pub homography: Homography,
    pub grid: GridSpec,
}

impl SceneGeometry {
    pub fn new(homography: Homography, grid: GridSpec) -> Self {
        Self { homography, grid }
    }

    pub fn real_to_grid(&self, p: RealPoint) -> Result<GridIndex, GeometryError> {
        Ok(self.grid.pixel_to_grid(self.homography.real_to_pixel(p)?))
    }

    pub fn real_to_continuous(&self, p: RealPoint) -> Result<(f64, f64), GeometryError> {
        Ok(self.grid.pixel_to_continuous(self.homography.real_to_pixel(p)?))
    }

    /// Jacobian of [`SceneGeometry::real_to_continuous`].
    pub fn continuous_jacobian(&self, p: RealPoint) -> Result<[[f64; 2]; 2], GeometryError> {
        let j = self.homography.jacobian(p)?;
        let sx = 1.0 / self.grid.cell_width();
        let sy = 1.0 / self.grid.cell_height();
        Ok([[j[0][0] * sx, j[0][1] * sx], [j[1][0] * sy, j[1][1] * sy]])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn spec500() -> GridSpec {
        GridSpec::new(100, 100, 500.0, 500.0).unwrap()
    }

    #[test]
    fn identity_projection() {
        let p = Homography::identity().real_to_pixel(RealPoint::new(3.0, 4.0)).unwrap();
        assert_eq!(p, PixelPoint::new(3.0, 4.0));
    }

    #[test]
    fn pure_scale_projection() {
        let h = Homography::new([[2.0, 0.0, 0.0], [0.0, 2.0, 0.0], [0.0, 0.0, 1.0]]).unwrap();
        let p = h.real_to_pixel(RealPoint::new(3.0, 4.0)).unwrap();
        assert_eq!(p, PixelPoint::new(6.0, 8.0));
    }

    #[test]
    fn perspective_divide() {
        // [1+5, 1+7, 0.5] -> (12, 16)
        let h = Homography::new([[1.0, 0.0, 5.0], [0.0, 1.0, 7.0], [0.0, 0.0, 0.5]]).unwrap();
        let p = h.real_to_pixel(RealPoint::new(1.0, 1.0)).unwrap();
        assert_eq!(p, PixelPoint::new(12.0, 16.0));
    }

    #[test]
    fn degenerate_projection_is_reported() {
        let h = Homography::new([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [1.0, 0.0, 1.0]]).unwrap();
        assert!(matches!(
            h.real_to_pixel(RealPoint::new(-1.0, 0.0)),
            Err(GeometryError::DegenerateProjection(_))
        ));
    }

    #[test]
    fn singular_matrix_rejected() {
        assert!(matches!(
            Homography::new([[1.0, 2.0, 0.0], [2.0, 4.0, 0.0], [0.0, 0.0, 1.0]]),
            Err(GeometryError::Singular(_))
        ));
    }

    #[test]
    fn pixel_to_grid_examples() {
        let s = spec500();
        assert_eq!(s.pixel_to_grid(PixelPoint::new(0.0, 0.0)), GridIndex::new(0, 0));
        assert_eq!(s.pixel_to_grid(PixelPoint::new(499.0, 499.0)), GridIndex::new(99, 99));
        assert_eq!(s.pixel_to_grid(PixelPoint::new(250.0, 125.0)), GridIndex::new(50, 25));
        assert_eq!(s.pixel_to_grid(PixelPoint::new(-40.0, 9000.0)), GridIndex::new(0, 99));
    }

    #[test]
    fn cell_center_examples() {
        let s = spec500();
        assert_eq!(s.cell_center(GridIndex::new(0, 0)).unwrap(), PixelPoint::new(2.5, 2.5));
        assert_eq!(
            s.cell_center(GridIndex::new(99, 99)).unwrap(),
            PixelPoint::new(497.5, 497.5)
        );
        let narrow = GridSpec::new(10, 10, 100.0, 200.0).unwrap();
        // cell is 10 px wide and 20 px tall
        assert_eq!(
            narrow.cell_center(GridIndex::new(3, 4)).unwrap(),
            PixelPoint::new(35.0, 90.0)
        );
        assert!(matches!(
            s.cell_center(GridIndex::new(100, 0)),
            Err(GeometryError::OutOfBounds { .. })
        ));
    }

    #[test]
    fn cell_center_on_rectangular_cells() {
        // 200 px wide over 10 cols and 100 px tall over 10 rows.
        let s = GridSpec::new(10, 10, 200.0, 100.0).unwrap();
        assert_eq!(
            s.cell_center(GridIndex::new(3, 4)).unwrap(),
            PixelPoint::new(70.0, 45.0)
        );
    }

    #[test]
    fn homography_file_roundtrip() {
        let h = Homography::new([[0.1, 0.2, 3.0], [-0.5, 2.0, 1.25], [0.001, 0.0, 1.0]]).unwrap();
        let parsed = Homography::parse(&h.to_string()).unwrap();
        assert_eq!(parsed, h);
        assert!(Homography::parse("1 0 0\n0 1 0\n").is_err());
        assert!(Homography::parse("1 0 0\n0 1 x\n0 0 1").is_err());
    }

    #[test]
    fn affine_fit_maps_box_corners() {
        let h = Homography::fit_affine(RealPoint::new(-2.0, 1.0), RealPoint::new(8.0, 6.0), 200.0, 100.0).unwrap();
        let lo = h.real_to_pixel(RealPoint::new(-2.0, 1.0)).unwrap();
        let hi = h.real_to_pixel(RealPoint::new(8.0, 6.0)).unwrap();
        assert!((lo.px).abs() < 1e-12 && (lo.py).abs() < 1e-12);
        assert!((hi.px - 200.0).abs() < 1e-12 && (hi.py - 100.0).abs() < 1e-12);
    }

    #[test]
    fn jacobian_matches_finite_differences() {
        let h = Homography::new([[1.3, 0.2, 5.0], [-0.4, 0.9, 7.0], [0.01, -0.02, 1.1]]).unwrap();
        let p = RealPoint::new(2.0, -1.5);
        let j = h.jacobian(p).unwrap();
        let eps = 1e-6;
        for (c, (dx, dy)) in [(eps, 0.0), (0.0, eps)].into_iter().enumerate() {
            let a = h.real_to_pixel(RealPoint::new(p.x + dx, p.y + dy)).unwrap();
            let b = h.real_to_pixel(RealPoint::new(p.x - dx, p.y - dy)).unwrap();
            assert!(((a.px - b.px) / (2.0 * eps) - j[0][c]).abs() < 1e-7);
            assert!(((a.py - b.py) / (2.0 * eps) - j[1][c]).abs() < 1e-7);
        }
    }

    proptest! {
        #[test]
        fn center_roundtrip(rows in 1usize..200, cols in 1usize..200,
                            w in 1.0f64..2000.0, h in 1.0f64..2000.0,
                            fx in 0.0f64..1.0, fy in 0.0f64..1.0) {
            let s = GridSpec::new(rows, cols, w, h).unwrap();
            let g = GridIndex::new(((cols as f64 * fx) as usize).min(cols - 1),
                                   ((rows as f64 * fy) as usize).min(rows - 1));
            prop_assert_eq!(s.pixel_to_grid(s.cell_center(g).unwrap()), g);
        }

        #[test]
        fn composition_matches_scene_geometry(x in -50.0f64..50.0, y in -50.0f64..50.0) {
            let h = Homography::new([[4.0, 0.5, 200.0], [-0.3, 4.0, 210.0], [0.0, 0.0, 1.0]]).unwrap();
            let s = spec500();
            let geom = SceneGeometry::new(h, s);
            let direct = s.pixel_to_grid(h.real_to_pixel(RealPoint::new(x, y)).unwrap());
            prop_assert_eq!(geom.real_to_grid(RealPoint::new(x, y)).unwrap(), direct);
        }

        #[test]
        fn identity_is_identity(x in -1e6f64..1e6, y in -1e6f64..1e6) {
            let p = Homography::identity().real_to_pixel(RealPoint::new(x, y)).unwrap();
            prop_assert_eq!(p, PixelPoint::new(x, y));
        }
    }
}
