//! Seeded synthetic scenes populated by scripted agents. Two layouts are
//! available: a cross-shaped corridor between dark obstacle blocks, and a
//! closed circular ring around a central disk where every agent follows
//! a constant-curvature path.
//!
//! Coordinates are meters on a square world with the origin at the image's
//! top-left corner. Annotations are sampled every `frame_step` frames at
//! 2.5 annotated steps per second.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use image::{GrayImage, Luma};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datasets::{parse_annotation_text, ColumnMap, DatasetError, Scene, Units};
use crate::geometry::{GeometryError, Homography, RealPoint};

/// Seconds between annotated steps.
pub const STEP_SECONDS: f64 = 0.4;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("writing {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("writing image {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Layout {
    /// Horizontal and vertical corridors crossing at the center; agents
    /// enter and leave through the world border.
    #[default]
    Cross,
    /// Circular ring corridor. Walkers circulate clockwise, crossers
    /// counter-clockwise and turners in a random direction.
    Ring,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub seed: u64,
    pub layout: Layout,
    pub scenes: usize,
    /// Side of the square world in meters.
    pub world_size: f64,
    /// Width of both corridors in meters.
    pub corridor_width: f64,
    pub pixels_per_meter: f64,
    /// Number of annotated steps per scene.
    pub steps: usize,
    pub frame_step: i64,
    pub walkers: usize,
    /// Pairs walking side by side.
    pub groups: usize,
    pub crossers: usize,
    /// Agents entering along one corridor and leaving along the other.
    pub turners: usize,
    pub vehicles: usize,
    pub obstacles_per_quadrant: usize,
    /// Standard deviation of position noise in meters.
    pub jitter: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            layout: Layout::Cross,
            scenes: 3,
            world_size: 20.0,
            corridor_width: 5.0,
            pixels_per_meter: 10.0,
            steps: 80,
            frame_step: 10,
            walkers: 4,
            groups: 1,
            crossers: 2,
            turners: 2,
            vehicles: 1,
            obstacles_per_quadrant: 2,
            jitter: 0.02,
        }
    }
}

impl SynthConfig {
    pub fn agent_count(&self) -> usize {
        self.walkers + 2 * self.groups + self.crossers + self.turners + self.vehicles
    }

    fn corridor(&self) -> (f64, f64) {
        let c = self.world_size / 2.0;
        let half = self.corridor_width / 2.0;
        (c - half, c + half)
    }

    /// Radii of the ring's inner and outer walls.
    fn ring(&self) -> (f64, f64) {
        let outer = 0.45 * self.world_size;
        (outer - self.corridor_width, outer)
    }
}

/// Axis-aligned rectangle in meters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Rect {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl Rect {
    pub fn contains(&self, p: RealPoint) -> bool {
        p.x >= self.x0 && p.x < self.x1 && p.y >= self.y0 && p.y < self.y1
    }
}

/// Dark region of a synthetic scene, in meters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Obstacle {
    Rect(Rect),
    Disk {
        cx: f64,
        cy: f64,
        r: f64,
    },
    /// Everything farther than `r` from the center.
    Outside {
        cx: f64,
        cy: f64,
        r: f64,
    },
}

impl Obstacle {
    pub fn contains(&self, p: RealPoint) -> bool {
        match *self {
            Obstacle::Rect(r) => r.contains(p),
            Obstacle::Disk { cx, cy, r } => (p.x - cx).hypot(p.y - cy) < r,
            Obstacle::Outside { cx, cy, r } => (p.x - cx).hypot(p.y - cy) > r,
        }
    }
}

/// One annotated row: frame, agent, position.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Row {
    pub frame: i64,
    pub agent: i64,
    pub pos: RealPoint,
}

#[derive(Clone, Debug)]
pub struct SynthScene {
    pub name: String,
    pub image: GrayImage,
    pub homography: Homography,
    pub obstacles: Vec<Obstacle>,
    pub rows: Vec<Row>,
    pub frame_step: i64,
}

/// Relative paths of one written scene.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneFiles {
    pub name: String,
    pub annotations: PathBuf,
    pub image: PathBuf,
    pub homography: PathBuf,
}

impl SynthScene {
    /// Tab-separated `frame agent x y` rows in frame order.
    pub fn annotation_text(&self) -> String {
        let mut out = String::new();
        for r in &self.rows {
            writeln!(out, "{}\t{}\t{}\t{}", r.frame, r.agent, r.pos.x, r.pos.y).expect("string write");
        }
        out
    }

    pub fn to_scene(&self) -> Result<Scene, DatasetError> {
        let mut scene =
            parse_annotation_text(&self.annotation_text(), &self.name, Units::Meters, ColumnMap::default())?;
        scene.homography = Some(self.homography);
        Ok(scene)
    }

    /// Writes `image.png`, `annotations.txt` and `homography.txt` under
    /// `root/<name>/`.
    pub fn write(&self, root: &Path) -> Result<SceneFiles, SynthError> {
        let dir = root.join(&self.name);
        std::fs::create_dir_all(&dir).map_err(|source| SynthError::Io {
            path: dir.clone(),
            source,
        })?;
        let rel = |f: &str| PathBuf::from(&self.name).join(f);
        let files = SceneFiles {
            name: self.name.clone(),
            annotations: rel("annotations.txt"),
            image: rel("image.png"),
            homography: rel("homography.txt"),
        };
        let write = |p: &Path, text: String| {
            std::fs::write(root.join(p), text).map_err(|source| SynthError::Io {
                path: root.join(p),
                source,
            })
        };
        write(&files.annotations, self.annotation_text())?;
        write(&files.homography, self.homography.to_string())?;
        self.image
            .save(root.join(&files.image))
            .map_err(|source| SynthError::Image {
                path: root.join(&files.image),
                source,
            })?;
        Ok(files)
    }
}

fn path_points(start: RealPoint, vel: (f64, f64), n: usize) -> Vec<RealPoint> {
    (0..n)
        .map(|k| {
            let t = k as f64 * STEP_SECONDS;
            RealPoint::new(start.x + vel.0 * t, start.y + vel.1 * t)
        })
        .collect()
}

/// Point at angle `theta` on a circle of radius `r` centered at `(c, c)`.
fn ring_point(c: f64, r: f64, theta: f64) -> RealPoint {
    RealPoint::new(c + r * theta.cos(), c + r * theta.sin())
}

fn inside(p: RealPoint, size: f64) -> bool {
    p.x >= 0.0 && p.y >= 0.0 && p.x < size && p.y < size
}

struct Builder<'a> {
    cfg: &'a SynthConfig,
    rng: ChaCha8Rng,
    rows: Vec<Row>,
    next_agent: i64,
}

impl Builder<'_> {
    fn speed(&mut self, lo: f64, hi: f64) -> f64 {
        self.rng.gen_range(lo..hi)
    }

    fn sign(&mut self) -> f64 {
        if self.rng.gen_bool(0.5) {
            1.0
        } else {
            -1.0
        }
    }

    /// Emits a path starting at a random step, clipped to the world.
    fn emit(&mut self, path: Vec<RealPoint>, start_step: usize) {
        let id = self.next_agent;
        self.next_agent += 1;
        for (k, p) in path.into_iter().enumerate() {
            let step = start_step + k;
            if step >= self.cfg.steps || !inside(p, self.cfg.world_size) {
                break;
            }
            let jitter = if self.cfg.jitter > 0.0 {
                let j = self.cfg.jitter;
                (
                    self.rng.gen_range(-j..j) * 3f64.sqrt(),
                    self.rng.gen_range(-j..j) * 3f64.sqrt(),
                )
            } else {
                (0.0, 0.0)
            };
            self.rows.push(Row {
                frame: step as i64 * self.cfg.frame_step,
                agent: id,
                pos: RealPoint::new(p.x + jitter.0, p.y + jitter.1),
            });
        }
    }

    fn start_step(&mut self) -> usize {
        self.rng.gen_range(0..(self.cfg.steps / 3).max(1))
    }

    /// Straight path along the horizontal (or vertical) corridor.
    fn corridor_path(&mut self, vertical: bool, offset: f64, speed: f64) -> Vec<RealPoint> {
        let size = self.cfg.world_size;
        let dir = self.sign();
        let across = offset;
        let along = if dir > 0.0 { 0.25 } else { size - 0.25 };
        let n = (size / (speed * STEP_SECONDS)).ceil() as usize + 1;
        if vertical {
            path_points(RealPoint::new(across, along), (0.0, dir * speed), n)
        } else {
            path_points(RealPoint::new(along, across), (dir * speed, 0.0), n)
        }
    }

    /// Offset from the ring's inner wall.
    fn ring_lane(&mut self, margin: f64) -> f64 {
        let w = self.cfg.corridor_width;
        let margin = margin.min(0.4 * w);
        self.rng.gen_range(margin..w - margin)
    }

    /// `steps` points around the ring at radius `r`, returning the start
    /// angle. `dir` is +1 for clockwise in image coordinates.
    fn ring_path(&mut self, r: f64, dir: f64, speed: f64) -> (f64, Vec<RealPoint>) {
        let c = self.cfg.world_size / 2.0;
        let theta0 = self.rng.gen_range(0.0..std::f64::consts::TAU);
        let omega = dir * speed / r;
        let path = (0..self.cfg.steps)
            .map(|k| ring_point(c, r, theta0 + omega * k as f64 * STEP_SECONDS))
            .collect();
        (theta0, path)
    }

    fn lane(&mut self, margin: f64) -> f64 {
        let (lo, hi) = self.cfg.corridor();
        let margin = margin.min(0.4 * (hi - lo));
        self.rng.gen_range(lo + margin..hi - margin)
    }
}

fn ring_obstacles(cfg: &SynthConfig) -> Vec<Obstacle> {
    let c = cfg.world_size / 2.0;
    let (inner, outer) = cfg.ring();
    vec![
        Obstacle::Disk { cx: c, cy: c, r: inner },
        Obstacle::Outside { cx: c, cy: c, r: outer },
    ]
}

fn obstacles(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Vec<Obstacle> {
    let (lo, hi) = cfg.corridor();
    let size = cfg.world_size;
    let quadrants = [
        (0.0, lo, 0.0, lo),
        (hi, size, 0.0, lo),
        (0.0, lo, hi, size),
        (hi, size, hi, size),
    ];
    let mut out = Vec::new();
    for &(x0, x1, y0, y1) in &quadrants {
        for _ in 0..cfg.obstacles_per_quadrant {
            let w = rng.gen_range(0.6..0.95) * (x1 - x0);
            let h = rng.gen_range(0.6..0.95) * (y1 - y0);
            let ox = rng.gen_range(x0..x1 - w);
            let oy = rng.gen_range(y0..y1 - h);
            out.push(Obstacle::Rect(Rect {
                x0: ox,
                y0: oy,
                x1: ox + w,
                y1: oy + h,
            }));
        }
    }
    out
}

fn render(cfg: &SynthConfig, blocks: &[Obstacle]) -> GrayImage {
    let n = (cfg.world_size * cfg.pixels_per_meter).round() as u32;
    GrayImage::from_fn(n, n, |x, y| {
        let p = RealPoint::new(
            (x as f64 + 0.5) / cfg.pixels_per_meter,
            (y as f64 + 0.5) / cfg.pixels_per_meter,
        );
        if blocks.iter().any(|b| b.contains(p)) {
            Luma([40])
        } else {
            Luma([220])
        }
    })
}

fn scene(cfg: &SynthConfig, index: usize) -> Result<SynthScene, SynthError> {
    let seed = cfg.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(index as u64);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let blocks = match cfg.layout {
        Layout::Cross => obstacles(cfg, &mut rng),
        Layout::Ring => ring_obstacles(cfg),
    };
    let image = render(cfg, &blocks);
    let mut b = Builder {
        cfg,
        rng,
        rows: Vec::new(),
        next_agent: 1,
    };
    match cfg.layout {
        Layout::Cross => cross_agents(&mut b),
        Layout::Ring => ring_agents(&mut b),
    }
    let mut rows = b.rows;
    rows.sort_by_key(|r| (r.frame, r.agent));
    let s = cfg.pixels_per_meter;
    Ok(SynthScene {
        name: format!("synth{index}"),
        image,
        homography: Homography::new([[s, 0.0, 0.0], [0.0, s, 0.0], [0.0, 0.0, 1.0]])?,
        obstacles: blocks,
        rows,
        frame_step: cfg.frame_step,
    })
}

fn cross_agents(b: &mut Builder) {
    let cfg = b.cfg;
    for _ in 0..cfg.walkers {
        let (y, v) = (b.lane(0.3), b.speed(1.0, 1.5));
        let path = b.corridor_path(false, y, v);
        let s = b.start_step();
        b.emit(path, s);
    }
    for _ in 0..cfg.groups {
        let (y, v) = (b.lane(0.8), b.speed(0.9, 1.3));
        let path = b.corridor_path(false, y, v);
        let s = b.start_step();
        for dy in [-0.35, 0.35] {
            let member = path.iter().map(|p| RealPoint::new(p.x, p.y + dy)).collect();
            b.emit(member, s);
        }
    }
    for _ in 0..cfg.crossers {
        let (x, v) = (b.lane(0.3), b.speed(1.0, 1.5));
        let path = b.corridor_path(true, x, v);
        let s = b.start_step();
        b.emit(path, s);
    }
    for _ in 0..cfg.turners {
        let (y, v) = (b.lane(0.5), b.speed(1.0, 1.4));
        let mut path = b.corridor_path(false, y, v);
        let turn_x = b.lane(0.5);
        let up = b.sign();
        // walk to the turning column, then leave along the vertical corridor
        if let Some(k) = path
            .windows(2)
            .position(|w| (w[0].x - turn_x) * (w[1].x - turn_x) <= 0.0)
        {
            let corner = RealPoint::new(turn_x, path[k].y);
            path.truncate(k + 1);
            let n = (cfg.world_size / (v * STEP_SECONDS)).ceil() as usize;
            path.extend(path_points(corner, (0.0, up * v), n).into_iter().skip(1));
        }
        let s = b.start_step();
        b.emit(path, s);
    }
    for _ in 0..cfg.vehicles {
        let y = b.lane(1.0);
        let path = b.corridor_path(false, y, 0.5);
        b.emit(path, 0);
    }
}

fn ring_agents(b: &mut Builder) {
    let cfg = b.cfg;
    let (inner, _) = cfg.ring();
    let circulate = |b: &mut Builder, dir: f64, lo: f64, hi: f64| {
        let (d, v) = (b.ring_lane(0.3), b.speed(lo, hi));
        let (_, path) = b.ring_path(inner + d, dir, v);
        let s = b.start_step();
        b.emit(path, s);
    };
    for _ in 0..cfg.walkers {
        circulate(b, 1.0, 1.0, 1.5);
    }
    for _ in 0..cfg.crossers {
        circulate(b, -1.0, 1.0, 1.5);
    }
    for _ in 0..cfg.turners {
        let dir = b.sign();
        circulate(b, dir, 1.0, 1.4);
    }
    for _ in 0..cfg.groups {
        let (d, v, dir) = (b.ring_lane(0.8), b.speed(0.9, 1.3), b.sign());
        let r = inner + d;
        let c = cfg.world_size / 2.0;
        let (theta0, _) = b.ring_path(r, dir, v);
        let omega = dir * v / r;
        let s = b.start_step();
        // side by side: same angle, radii differing by the pair spacing
        for dr in [-0.35, 0.35] {
            let member = (0..cfg.steps)
                .map(|k| ring_point(c, r + dr, theta0 + omega * k as f64 * STEP_SECONDS))
                .collect();
            b.emit(member, s);
        }
    }
    for _ in 0..cfg.vehicles {
        let (d, dir) = (b.ring_lane(1.0), b.sign());
        let (_, path) = b.ring_path(inner + d, dir, 0.5);
        b.emit(path, 0);
    }
}

pub fn generate(cfg: &SynthConfig) -> Result<Vec<SynthScene>, SynthError> {
    (0..cfg.scenes).map(|i| scene(cfg, i)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::{window_samples, PRED_LEN};
    use crate::transfer_social::linear_prior_real;

    #[test]
    fn deterministic() {
        let cfg = SynthConfig::default();
        let a = generate(&cfg).unwrap();
        let b = generate(&cfg).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.annotation_text(), y.annotation_text());
            assert_eq!(x.image, y.image);
        }
        assert_ne!(a[0].annotation_text(), a[1].annotation_text());
    }

    #[test]
    fn agents_avoid_obstacles() {
        for layout in [Layout::Cross, Layout::Ring] {
            let cfg = SynthConfig {
                layout,
                jitter: 0.0,
                corridor_width: 2.5,
                ..SynthConfig::default()
            };
            for s in generate(&cfg).unwrap() {
                assert!(!s.rows.is_empty());
                for r in &s.rows {
                    assert!(s.obstacles.iter().all(|b| !b.contains(r.pos)), "{layout:?} {r:?}");
                }
            }
        }
    }

    #[test]
    fn ring_agents_keep_their_radius() {
        let cfg = SynthConfig {
            layout: Layout::Ring,
            jitter: 0.0,
            groups: 0,
            ..SynthConfig::default()
        };
        let (inner, outer) = cfg.ring();
        let c = cfg.world_size / 2.0;
        for s in generate(&cfg).unwrap() {
            let scene = s.to_scene().unwrap();
            for track in &scene.tracks {
                let radii: Vec<f64> = track.points().map(|p| (p.pos.x - c).hypot(p.pos.y - c)).collect();
                assert!(radii.iter().all(|r| (r - radii[0]).abs() < 1e-9));
                assert!(radii[0] > inner && radii[0] < outer);
            }
        }
    }

    #[test]
    fn straight_agents_are_linear() {
        let cfg = SynthConfig {
            jitter: 0.0,
            turners: 0,
            ..SynthConfig::default()
        };
        for s in generate(&cfg).unwrap() {
            let scene = s.to_scene().unwrap();
            let samples = window_samples(&scene, None);
            assert!(!samples.is_empty());
            for smp in samples {
                let pred = linear_prior_real(&smp.observed);
                for k in 0..PRED_LEN {
                    assert!(pred[k].distance(&smp.future[k]) < 1e-9);
                }
            }
        }
    }

    #[test]
    fn no_agents_gives_empty_annotations() {
        let cfg = SynthConfig {
            walkers: 0,
            groups: 0,
            crossers: 0,
            turners: 0,
            vehicles: 0,
            scenes: 1,
            ..SynthConfig::default()
        };
        let s = &generate(&cfg).unwrap()[0];
        assert_eq!(s.annotation_text(), "");
        assert!(matches!(s.to_scene(), Err(DatasetError::NoValidRows(_))));
    }

    #[test]
    fn written_bundle_reloads() {
        let dir = tempfile::tempdir().unwrap();
        let s = &generate(&SynthConfig::default()).unwrap()[0];
        let files = s.write(dir.path()).unwrap();
        let text = std::fs::read_to_string(dir.path().join(&files.annotations)).unwrap();
        assert_eq!(text, s.annotation_text());
        let h = Homography::load(&dir.path().join(&files.homography)).unwrap();
        assert_eq!(h, s.homography);
        let img = image::open(dir.path().join(&files.image)).unwrap();
        assert_eq!(img.width(), 200);
        let loaded = crate::transfer_physical::SceneImage::load(&dir.path().join(&files.image)).unwrap();
        assert_eq!(loaded, crate::transfer_physical::SceneImage::from_gray(&s.image));
    }
}
