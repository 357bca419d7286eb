//! Annotation ingest, temporal resampling, 8/12 windowing and
//! leave-one-out splits.

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{Homography, RealPoint};

/// Observed steps per sample.
pub const OBS_LEN: usize = 8;
/// Predicted steps per sample.
pub const PRED_LEN: usize = 12;
pub const WINDOW_LEN: usize = OBS_LEN + PRED_LEN;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("reading {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{0}: no parseable annotation rows")]
    NoValidRows(String),
    #[error("agent {agent} observed twice at frame {frame}")]
    DuplicateObservation { agent: i64, frame: i64 },
    #[error("unknown scene {0:?}")]
    UnknownScene(String),
}

/// Which whitespace-separated columns hold each field.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ColumnMap {
    pub frame: usize,
    pub agent: usize,
    pub x: usize,
    pub y: usize,
}

impl Default for ColumnMap {
    fn default() -> Self {
        Self {
            frame: 0,
            agent: 1,
            x: 2,
            y: 3,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Units {
    #[default]
    Meters,
    Pixels,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrackPoint {
    pub frame: i64,
    pub agent_id: i64,
    pub pos: RealPoint,
}

/// One agent's track, split into segments of uniform frame spacing.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Track {
    pub agent_id: i64,
    pub segments: Vec<Vec<TrackPoint>>,
}

impl Track {
    pub fn points(&self) -> impl Iterator<Item = &TrackPoint> {
        self.segments.iter().flatten()
    }

    pub fn len(&self) -> usize {
        self.segments.iter().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub name: String,
    pub units: Units,
    /// Raw frame spacing between consecutive kept annotations.
    pub frame_step: i64,
    /// Sorted by agent id.
    pub tracks: Vec<Track>,
    pub homography: Option<Homography>,
    pub image: Option<PathBuf>,
    /// Rows that failed to parse.
    pub skipped_rows: usize,
}

impl Scene {
    pub fn track(&self, agent_id: i64) -> Option<&Track> {
        self.tracks
            .binary_search_by_key(&agent_id, |t| t.agent_id)
            .ok()
            .map(|i| &self.tracks[i])
    }

    pub fn all_points(&self) -> impl Iterator<Item = &TrackPoint> {
        self.tracks.iter().flat_map(Track::points)
    }

    /// Bounding box of all positions, if any.
    pub fn bounds(&self) -> Option<(RealPoint, RealPoint)> {
        let mut it = self.all_points();
        let first = it.next()?.pos;
        let (mut lo, mut hi) = (first, first);
        for p in it {
            lo.x = lo.x.min(p.pos.x);
            lo.y = lo.y.min(p.pos.y);
            hi.x = hi.x.max(p.pos.x);
            hi.y = hi.y.max(p.pos.y);
        }
        Some((lo, hi))
    }
}

/// Parses one annotation file. Malformed rows are counted and skipped.
pub fn parse_annotations(path: &Path, name: &str, units: Units, columns: ColumnMap) -> Result<Scene, DatasetError> {
    let text = std::fs::read_to_string(path).map_err(|source| DatasetError::Io {
        path: path.to_owned(),
        source,
    })?;
    parse_annotation_text(&text, name, units, columns)
}

pub fn parse_annotation_text(text: &str, name: &str, units: Units, columns: ColumnMap) -> Result<Scene, DatasetError> {
    let mut by_agent: BTreeMap<i64, Vec<TrackPoint>> = BTreeMap::new();
    let mut skipped = 0;
    let mut parsed = 0;
    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        match parse_row(line, columns) {
            Some(tp) => {
                parsed += 1;
                by_agent.entry(tp.agent_id).or_default().push(tp);
            }
            None => skipped += 1,
        }
    }
    if parsed == 0 {
        return Err(DatasetError::NoValidRows(name.to_owned()));
    }
    if skipped > 0 {
        log::warn!("{name}: skipped {skipped} malformed annotation rows");
    }

    let mut tracks = Vec::with_capacity(by_agent.len());
    let mut diffs = Vec::new();
    for (agent_id, mut pts) in by_agent {
        pts.sort_by_key(|p| p.frame);
        for w in pts.windows(2) {
            if w[0].frame == w[1].frame {
                return Err(DatasetError::DuplicateObservation {
                    agent: agent_id,
                    frame: w[0].frame,
                });
            }
            diffs.push(w[1].frame - w[0].frame);
        }
        tracks.push(Track {
            agent_id,
            segments: vec![pts],
        });
    }
    let frame_step = diffs.into_iter().fold(0, gcd).max(1);

    Ok(Scene {
        name: name.to_owned(),
        units,
        frame_step,
        tracks,
        homography: None,
        image: None,
        skipped_rows: skipped,
    })
}

fn parse_row(line: &str, c: ColumnMap) -> Option<TrackPoint> {
    let cols: Vec<&str> = line
        .split(|ch: char| ch.is_whitespace() || ch == ',')
        .filter(|s| !s.is_empty())
        .collect();
    let num = |i: usize| cols.get(i).and_then(|s| s.parse::<f64>().ok());
    let frame = num(c.frame)?;
    let agent = num(c.agent)?;
    let x = num(c.x)?;
    let y = num(c.y)?;
    if !(x.is_finite() && y.is_finite() && frame.fract() == 0.0 && agent.fract() == 0.0) {
        return None;
    }
    Some(TrackPoint {
        frame: frame as i64,
        agent_id: agent as i64,
        pos: RealPoint::new(x, y),
    })
}

fn gcd(a: i64, b: i64) -> i64 {
    if b == 0 {
        a.abs()
    } else {
        gcd(b, a % b)
    }
}

/// Keeps every `stride`-th annotation step of each track and splits
/// tracks wherever consecutive kept frames are further apart than the new
/// spacing.
pub fn resample(scene: &Scene, stride: i64) -> Scene {
    let stride = stride.max(1);
    let step = scene.frame_step * stride;
    let tracks = scene
        .tracks
        .iter()
        .map(|t| {
            let mut segments: Vec<Vec<TrackPoint>> = Vec::new();
            let mut current: Vec<TrackPoint> = Vec::new();
            for p in t.points() {
                match current.last() {
                    None => current.push(*p),
                    Some(last) => {
                        let d = p.frame - last.frame;
                        if d == step {
                            current.push(*p);
                        } else if d > step {
                            segments.push(std::mem::take(&mut current));
                            current.push(*p);
                        }
                    }
                }
            }
            if !current.is_empty() {
                segments.push(current);
            }
            Track {
                agent_id: t.agent_id,
                segments,
            }
        })
        .collect();
    Scene {
        frame_step: step,
        tracks,
        ..scene.clone()
    }
}

/// Identifies a sample within its scene.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SampleId {
    pub scene: String,
    pub agent_id: i64,
    /// Frame of the first observed step.
    pub start_frame: i64,
}

impl std::fmt::Display for SampleId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}:{}@{}", self.scene, self.agent_id, self.start_frame)
    }
}

impl std::str::FromStr for SampleId {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (scene, rest) = s
            .rsplit_once(':')
            .ok_or_else(|| format!("expected scene:agent@frame, got {s:?}"))?;
        let (agent, frame) = rest
            .split_once('@')
            .ok_or_else(|| format!("expected scene:agent@frame, got {s:?}"))?;
        Ok(Self {
            scene: scene.to_owned(),
            agent_id: agent.parse().map_err(|_| format!("bad agent id {agent:?}"))?,
            start_frame: frame.parse().map_err(|_| format!("bad frame {frame:?}"))?,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Neighbor {
    pub agent_id: i64,
    pub observed: [RealPoint; OBS_LEN],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectorySample {
    pub id: SampleId,
    pub observed: [RealPoint; OBS_LEN],
    pub future: [RealPoint; PRED_LEN],
    /// Sorted by agent id; never contains the target itself.
    pub neighbors: Vec<Neighbor>,
}

impl TrajectorySample {
    pub fn agent_id(&self) -> i64 {
        self.id.agent_id
    }

    pub fn scene(&self) -> &str {
        &self.id.scene
    }

    pub fn last_observed(&self) -> RealPoint {
        self.observed[OBS_LEN - 1]
    }
}

/// Slides a 20-step window with stride 1 over every contiguous segment.
///
/// Neighbors are the other agents annotated at all 8 observed frames,
/// optionally limited to those within `radius` of the target at the last
/// observed step.
pub fn window_samples(scene: &Scene, radius: Option<f64>) -> Vec<TrajectorySample> {
    let mut at_frame: HashMap<i64, Vec<(i64, RealPoint)>> = HashMap::new();
    for t in &scene.tracks {
        for p in t.points() {
            at_frame.entry(p.frame).or_default().push((t.agent_id, p.pos));
        }
    }
    let lookup = |frame: i64, agent: i64| -> Option<RealPoint> {
        at_frame.get(&frame)?.iter().find(|(a, _)| *a == agent).map(|(_, p)| *p)
    };

    let mut out = Vec::new();
    for track in &scene.tracks {
        for seg in &track.segments {
            if seg.len() < WINDOW_LEN {
                continue;
            }
            for start in 0..=seg.len() - WINDOW_LEN {
                let win = &seg[start..start + WINDOW_LEN];
                let observed: [RealPoint; OBS_LEN] = std::array::from_fn(|i| win[i].pos);
                let future: [RealPoint; PRED_LEN] = std::array::from_fn(|i| win[OBS_LEN + i].pos);

                // Candidates: agents present at the first observed frame, in
                // ascending id order.
                let mut candidates: Vec<i64> = at_frame
                    .get(&win[0].frame)
                    .map(|v| v.iter().map(|(a, _)| *a).collect())
                    .unwrap_or_default();
                candidates.sort_unstable();
                candidates.dedup();

                let mut neighbors = Vec::new();
                for agent in candidates {
                    if agent == track.agent_id {
                        continue;
                    }
                    let obs: Option<Vec<RealPoint>> = win[..OBS_LEN].iter().map(|tp| lookup(tp.frame, agent)).collect();
                    let Some(obs) = obs else { continue };
                    if let Some(r) = radius {
                        if obs[OBS_LEN - 1].distance(&observed[OBS_LEN - 1]) > r {
                            continue;
                        }
                    }
                    neighbors.push(Neighbor {
                        agent_id: agent,
                        observed: std::array::from_fn(|i| obs[i]),
                    });
                }

                out.push(TrajectorySample {
                    id: SampleId {
                        scene: scene.name.clone(),
                        agent_id: track.agent_id,
                        start_frame: win[0].frame,
                    },
                    observed,
                    future,
                    neighbors,
                });
            }
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub train_scenes: Vec<String>,
    pub test_scene: String,
}

impl SplitPlan {
    /// True when there is nothing to train on.
    pub fn is_degenerate(&self) -> bool {
        self.train_scenes.is_empty()
    }
}

/// Holds out `test_name` and trains on every other scene.
pub fn leave_one_out<S: AsRef<str>>(scene_names: &[S], test_name: &str) -> Result<SplitPlan, DatasetError> {
    if !scene_names.iter().any(|s| s.as_ref() == test_name) {
        return Err(DatasetError::UnknownScene(test_name.to_owned()));
    }
    let plan = SplitPlan {
        train_scenes: scene_names
            .iter()
            .map(AsRef::as_ref)
            .filter(|s| *s != test_name)
            .map(str::to_owned)
            .collect(),
        test_scene: test_name.to_owned(),
    };
    if plan.is_degenerate() {
        log::warn!("leave-one-out on {test_name:?}: no scenes left to train on");
    }
    Ok(plan)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scene_from(text: &str) -> Scene {
        parse_annotation_text(text, "s", Units::Meters, ColumnMap::default()).unwrap()
    }

    fn straight_track(agent: i64, frames: std::ops::Range<i64>, step: i64, y: f64) -> String {
        frames
            .map(|f| format!("{} {} {} {}\n", f * step, agent, f as f64 * 0.5, y))
            .collect()
    }

    #[test]
    fn parses_single_row() {
        let s = scene_from("10 3 2.5 7.0\n");
        assert_eq!(s.tracks.len(), 1);
        let tp = s.tracks[0].segments[0][0];
        assert_eq!(
            tp,
            TrackPoint {
                frame: 10,
                agent_id: 3,
                pos: RealPoint::new(2.5, 7.0)
            }
        );
    }

    #[test]
    fn column_map_reorders_fields() {
        let map = ColumnMap {
            frame: 1,
            agent: 0,
            x: 3,
            y: 2,
        };
        let s = parse_annotation_text("3 10 7.0 2.5\n", "s", Units::Meters, map).unwrap();
        assert_eq!(s.tracks[0].segments[0][0].pos, RealPoint::new(2.5, 7.0));
        assert_eq!(s.tracks[0].segments[0][0].frame, 10);
    }

    #[test]
    fn groups_by_agent_and_sorts_frames() {
        let s = scene_from("20 1 0 0\n0 2 1 1\n0 1 0 0\n10 1 0 0\n10 2 1 1\n");
        assert_eq!(s.tracks.len(), 2);
        let frames: Vec<i64> = s.tracks[0].points().map(|p| p.frame).collect();
        assert_eq!(frames, vec![0, 10, 20]);
        assert_eq!(s.frame_step, 10);
    }

    #[test]
    fn malformed_rows_skipped_and_counted() {
        let s = scene_from("0 1 0 0\nbanana\n10 1 x 0\n\n# comment\n20 1 1 1\n");
        assert_eq!(s.skipped_rows, 2);
        assert_eq!(s.tracks[0].len(), 2);
    }

    #[test]
    fn empty_input_is_no_valid_rows() {
        assert!(matches!(
            parse_annotation_text("", "s", Units::Meters, ColumnMap::default()),
            Err(DatasetError::NoValidRows(_))
        ));
    }

    #[test]
    fn duplicate_observation_rejected() {
        assert!(matches!(
            parse_annotation_text("0 1 0 0\n0 1 1 1\n", "s", Units::Meters, ColumnMap::default()),
            Err(DatasetError::DuplicateObservation { agent: 1, frame: 0 })
        ));
    }

    #[test]
    fn missing_file_is_io_error() {
        assert!(matches!(
            parse_annotations(
                Path::new("/nonexistent/x.txt"),
                "s",
                Units::Meters,
                ColumnMap::default()
            ),
            Err(DatasetError::Io { .. })
        ));
    }

    #[test]
    fn stride_one_is_identity() {
        let s = scene_from(&straight_track(1, 0..30, 10, 0.0));
        let r = resample(&s, 1);
        assert_eq!(r.tracks, s.tracks);
    }

    #[test]
    fn resample_25fps_to_2_5fps() {
        let s = scene_from(&straight_track(1, 0..41, 1, 0.0));
        assert_eq!(s.frame_step, 1);
        let r = resample(&s, 10);
        let frames: Vec<i64> = r.tracks[0].points().map(|p| p.frame).collect();
        assert_eq!(frames, vec![0, 10, 20, 30, 40]);
        assert_eq!(r.tracks[0].segments.len(), 1);
        assert_eq!(r.frame_step, 10);
    }

    #[test]
    fn gap_splits_track() {
        let mut text = straight_track(1, 0..5, 10, 0.0);
        text += &straight_track(1, 9..14, 10, 0.0);
        let r = resample(&scene_from(&text), 1);
        let segs: Vec<Vec<i64>> = r.tracks[0]
            .segments
            .iter()
            .map(|s| s.iter().map(|p| p.frame).collect())
            .collect();
        assert_eq!(segs, vec![vec![0, 10, 20, 30, 40], vec![90, 100, 110, 120, 130]]);
    }

    #[test]
    fn window_counts() {
        let s = resample(&scene_from(&straight_track(1, 0..20, 10, 0.0)), 1);
        assert_eq!(window_samples(&s, None).len(), 1);
        let s = resample(&scene_from(&straight_track(1, 0..19, 10, 0.0)), 1);
        assert!(window_samples(&s, None).is_empty());
        let s = resample(&scene_from(&straight_track(1, 0..25, 10, 0.0)), 1);
        let samples = window_samples(&s, None);
        assert_eq!(samples.len(), 6);
        assert_eq!(samples[5].id.start_frame, 50);
        assert_eq!(samples[5].future[11].x, 24.0 * 0.5);
    }

    #[test]
    fn co_present_agents_are_neighbors() {
        let mut text = straight_track(1, 0..20, 10, 0.0);
        text += &straight_track(2, 0..20, 10, 3.0);
        let samples = window_samples(&resample(&scene_from(&text), 1), None);
        assert_eq!(samples.len(), 2);
        assert_eq!(samples[0].neighbors.len(), 1);
        assert_eq!(samples[0].neighbors[0].agent_id, 2);
        assert_eq!(samples[1].neighbors[0].agent_id, 1);
        assert_eq!(samples[0].neighbors[0].observed[7], RealPoint::new(3.5, 3.0));
    }

    #[test]
    fn partially_present_agents_dropped() {
        let mut text = straight_track(1, 0..20, 10, 0.0);
        text += &straight_track(2, 3..20, 10, 3.0);
        let samples = window_samples(&resample(&scene_from(&text), 1), None);
        assert_eq!(samples.len(), 1);
        assert!(samples[0].neighbors.is_empty());
    }

    #[test]
    fn radius_filter() {
        let mut text = straight_track(1, 0..20, 10, 0.0);
        text += &straight_track(2, 0..20, 10, 3.0);
        text += &straight_track(3, 0..20, 10, 30.0);
        let samples = window_samples(&resample(&scene_from(&text), 1), Some(5.0));
        let ids: Vec<i64> = samples[0].neighbors.iter().map(|n| n.agent_id).collect();
        assert_eq!(ids, vec![2]);
    }

    #[test]
    fn windowing_is_deterministic() {
        let mut text = straight_track(3, 0..30, 10, 0.0);
        text += &straight_track(1, 2..26, 10, 3.0);
        text += &straight_track(2, 0..22, 10, 1.0);
        let a = window_samples(&resample(&scene_from(&text), 1), None);
        let b = window_samples(&resample(&scene_from(&text), 1), None);
        assert_eq!(a, b);
        for s in &a {
            assert!(s.neighbors.iter().all(|n| n.agent_id != s.agent_id()));
        }
    }

    #[test]
    fn leave_one_out_splits() {
        let plan = leave_one_out(&["a", "b", "c"], "b").unwrap();
        assert_eq!(plan.train_scenes, vec!["a", "c"]);
        assert_eq!(plan.test_scene, "b");

        let plan = leave_one_out(&["a"], "a").unwrap();
        assert!(plan.is_degenerate());

        let eth_ucy = ["eth", "hotel", "zara1", "zara2", "univ"];
        let plan = leave_one_out(&eth_ucy, "eth").unwrap();
        assert_eq!(plan.train_scenes.len(), 4);

        assert!(matches!(leave_one_out(&["a"], "z"), Err(DatasetError::UnknownScene(_))));
    }

    #[test]
    fn sample_id_parses_back() {
        let id = SampleId {
            scene: "zara:1".into(),
            agent_id: 4,
            start_frame: -30,
        };
        assert_eq!(id.to_string().parse::<SampleId>().unwrap(), id);
    }
}
