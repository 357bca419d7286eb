//! Command implementations behind the `ctxfer` binary.

pub mod commands;
pub mod config;
pub mod manifest;

use std::path::{Path, PathBuf};

use ctxfer_core::context_fusion::FusionError;
use ctxfer_core::datasets::DatasetError;
use ctxfer_core::density::DensityError;
use ctxfer_core::evaluation::EvalError;
use ctxfer_core::geometry::GeometryError;
use ctxfer_core::grid::GridError;
use ctxfer_core::neural::CheckpointError;
use ctxfer_core::synth::SynthError;
use ctxfer_core::training::TrainError;
use ctxfer_core::transfer_physical::TransferError;
use thiserror::Error;

pub use commands::{run, Command};
pub use config::{Overrides, RunConfig};
pub use manifest::{SceneEntry, SceneManifest};

/// File written into the output directory when a command fails.
pub const ERROR_ARTIFACT: &str = "error.json";

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{artifact} not found at {}; run `ctxfer {command}` first", path.display())]
    MissingArtifact {
        artifact: String,
        path: PathBuf,
        command: &'static str,
    },
    #[error("sample {0} is not in the bundle")]
    UnknownSample(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Density(#[from] DensityError),
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error(transparent)]
    Transfer(#[from] TransferError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    Fusion(#[from] FusionError),
}

/// Writes `bytes` to `path`, creating parent directories.
pub fn write_file(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    let io = |source| CliError::Io {
        path: path.to_owned(),
        source,
    };
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(io)?;
    }
    std::fs::write(path, bytes).map_err(io)
}

pub fn create_dir(path: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(path).map_err(|source| CliError::Io {
        path: path.to_owned(),
        source,
    })
}

/// Records a failed command in `out`. Returns the artifact path.
pub fn write_error_artifact(out: &Path, command: &str, err: &dyn std::fmt::Display) -> Result<PathBuf, CliError> {
    let path = out.join(ERROR_ARTIFACT);
    let body = serde_json::json!({ "command": command, "error": err.to_string() });
    write_file(
        &path,
        (serde_json::to_string_pretty(&body).expect("json value") + "\n").as_bytes(),
    )?;
    Ok(path)
}

/// Removes a stale error artifact after a successful command.
pub fn clear_error_artifact(out: &Path) -> Result<(), CliError> {
    let path = out.join(ERROR_ARTIFACT);
    match std::fs::remove_file(&path) {
        Err(e) if e.kind() != std::io::ErrorKind::NotFound => Err(CliError::Io { path, source: e }),
        _ => Ok(()),
    }
}
