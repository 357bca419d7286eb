//! Trajectory prediction with transferred physical and social context.

pub mod context_fusion;
pub mod datasets;
pub mod density;
pub mod evaluation;
pub mod geometry;
pub mod grid;
pub mod neural;
pub mod synth;
pub mod training;
pub mod transfer_physical;
pub mod transfer_social;

pub use datasets::{SampleId, Scene, TrajectorySample, OBS_LEN, PRED_LEN};
pub use geometry::{GridIndex, GridSpec, Homography, PixelPoint, RealPoint, SceneGeometry};
pub use grid::Grid;
