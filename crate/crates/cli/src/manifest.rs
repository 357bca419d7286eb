//! The scene manifest: one entry per scene with annotation, image and
//! homography paths relative to the manifest file.

use std::path::{Path, PathBuf};

use ctxfer_core::datasets::{parse_annotations, resample, ColumnMap, Units};
use ctxfer_core::transfer_physical::SceneImage;
use ctxfer_core::{GridSpec, Homography, Scene};
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneManifest {
    /// Seed the bundle was generated with, if synthetic.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    pub scenes: Vec<SceneEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneEntry {
    pub name: String,
    pub annotations: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image: Option<PathBuf>,
    /// Scene-to-pixel homography. Absent means annotations are in pixels.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub homography: Option<PathBuf>,
    #[serde(default)]
    pub units: Units,
    /// Keep every n-th annotated frame.
    #[serde(default = "one")]
    pub stride: i64,
    #[serde(default)]
    pub columns: ColumnMap,
    /// Pixel extent of the scene, needed when there is no image.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub width: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub height: Option<u32>,
}

fn one() -> i64 {
    1
}

/// A parsed scene with its image and evaluation grid.
#[derive(Clone, Debug)]
pub struct LoadedScene {
    pub scene: Scene,
    pub image: Option<SceneImage>,
    pub grid: GridSpec,
}

impl SceneManifest {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|source| CliError::Io {
            path: path.to_owned(),
            source,
        })?;
        toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }

    pub fn save(&self, path: &Path) -> Result<(), CliError> {
        let text = toml::to_string(self).map_err(|e| CliError::Config(e.to_string()))?;
        crate::write_file(path, text.as_bytes())
    }

    pub fn names(&self) -> Vec<&str> {
        self.scenes.iter().map(|s| s.name.as_str()).collect()
    }

    /// Parses every scene, resolving paths against `base`.
    pub fn load_scenes(&self, base: &Path, grid: (usize, usize)) -> Result<Vec<LoadedScene>, CliError> {
        self.scenes.iter().map(|e| e.load(base, grid)).collect()
    }
}

impl SceneEntry {
    pub fn load(&self, base: &Path, (rows, cols): (usize, usize)) -> Result<LoadedScene, CliError> {
        let resolve = |p: &Path| base.join(p);
        let mut scene = parse_annotations(&resolve(&self.annotations), &self.name, self.units, self.columns)?;
        scene = resample(&scene, self.stride);
        if let Some(h) = &self.homography {
            scene.homography = Some(Homography::load(&resolve(h))?);
        }
        let image = match &self.image {
            Some(p) => {
                let path = resolve(p);
                scene.image = Some(path.clone());
                Some(SceneImage::load(&path)?)
            }
            None => None,
        };
        let (width, height) = match (&image, self.width, self.height) {
            (_, Some(w), Some(h)) => (w as f64, h as f64),
            (Some(img), _, _) => (img.width as f64, img.height as f64),
            _ => {
                return Err(CliError::Config(format!(
                    "scene {} has neither an image nor width/height",
                    self.name
                )))
            }
        };
        let grid = GridSpec::new(rows, cols, width, height)?;
        Ok(LoadedScene { scene, image, grid })
    }
}
