//! Physical transfer: a small encoder-decoder `G` mapping a grayscale scene
//! image to a non-negative activity grid, trained with the squared
//! per-cell error against density labels.

use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};

use image::imageops::{self, FilterType};
use image::{ImageBuffer, Luma};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::density::ActivityGrid;
use crate::grid::Grid;
use crate::neural::layers;
use crate::neural::{optimizer_step, AutodiffError, Graph, OptimError, OptimizerConfig, ParamStore, TransferSpec, Var};

pub const TRANSFER_PREFIX: &str = "transfer.";

/// Output level of a freshly initialized model, on the scale of unit-max
/// activity labels.
pub const INITIAL_OUTPUT: f64 = 0.05;

const RELU_BIAS: f64 = 0.1;

fn inverse_softplus(y: f64) -> f64 {
    y.exp_m1().ln()
}

#[derive(Debug, Error)]
pub enum TransferError {
    #[error("reading image {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: image::ImageError,
    },
    #[error("image pixels must be finite values in [0, 1]")]
    InvalidPixels,
    #[error("shape mismatch: expected {expected:?}, got {actual:?}")]
    ShapeMismatch {
        expected: (usize, usize),
        actual: (usize, usize),
    },
    #[error("non-finite transfer loss at epoch {epoch} on scene {scene:?}")]
    NonFiniteLoss { epoch: usize, scene: String },
    #[error("no training pairs")]
    NoPairs,
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Optim(#[from] OptimError),
}

/// Row-major image with values in `[0, 1]`, one or three channels
/// interleaved.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneImage {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub pixels: Vec<f64>,
}

impl SceneImage {
    pub fn new(width: usize, height: usize, channels: usize, pixels: Vec<f64>) -> Result<Self, TransferError> {
        if !matches!(channels, 1 | 3)
            || pixels.len() != width * height * channels
            || pixels.iter().any(|v| !(0.0..=1.0).contains(v))
        {
            return Err(TransferError::InvalidPixels);
        }
        Ok(Self {
            width,
            height,
            channels,
            pixels,
        })
    }

    /// Loads an 8-bit gray or RGB PNG. Other color types are converted to RGB.
    pub fn load(path: &Path) -> Result<Self, TransferError> {
        let img = image::open(path).map_err(|source| TransferError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let (w, h) = (img.width() as usize, img.height() as usize);
        let (channels, raw) = match img {
            image::DynamicImage::ImageLuma8(g) => (1, g.into_raw()),
            other => (3, other.into_rgb8().into_raw()),
        };
        let pixels = raw.into_iter().map(|v| v as f64 / 255.0).collect();
        Self::new(w, h, channels, pixels)
    }

    pub fn from_gray(img: &image::GrayImage) -> Self {
        Self {
            width: img.width() as usize,
            height: img.height() as usize,
            channels: 1,
            pixels: img.as_raw().iter().map(|v| *v as f64 / 255.0).collect(),
        }
    }

    pub fn to_gray(&self) -> Vec<f64> {
        if self.channels == 1 {
            return self.pixels.clone();
        }
        self.pixels
            .chunks(3)
            .map(|c| 0.299 * c[0] + 0.587 * c[1] + 0.114 * c[2])
            .collect()
    }

    /// Grayscale copy resized to `size x size`.
    pub fn model_input(&self, size: usize) -> SceneImage {
        let gray = self.to_gray();
        if self.width == size && self.height == size {
            return SceneImage {
                width: size,
                height: size,
                channels: 1,
                pixels: gray,
            };
        }
        let buf: ImageBuffer<Luma<f32>, Vec<f32>> = ImageBuffer::from_raw(
            self.width as u32,
            self.height as u32,
            gray.iter().map(|v| *v as f32).collect(),
        )
        .expect("buffer length matches dimensions");
        let out = imageops::resize(&buf, size as u32, size as u32, FilterType::Triangle);
        SceneImage {
            width: size,
            height: size,
            channels: 1,
            pixels: out.into_raw().into_iter().map(|v| (v as f64).clamp(0.0, 1.0)).collect(),
        }
    }
}

/// The trainable transfer model. Parameters live in a [`ParamStore`] under
/// the `transfer.` prefix.
#[derive(Debug)]
pub struct TransferModel {
    pub spec: TransferSpec,
    calls: AtomicUsize,
}

impl Clone for TransferModel {
    fn clone(&self) -> Self {
        Self::new(self.spec.clone())
    }
}

impl TransferModel {
    pub fn new(spec: TransferSpec) -> Self {
        Self {
            spec,
            calls: AtomicUsize::new(0),
        }
    }

    /// Number of forward passes run so far.
    pub fn call_count(&self) -> usize {
        self.calls.load(Ordering::Relaxed)
    }

    pub fn output_size(&self) -> usize {
        self.spec.output_size()
    }

    /// Layer list for manifests and logs.
    pub fn describe(&self) -> Vec<String> {
        let s = &self.spec;
        let n = s.input_size;
        vec![
            format!("input 1x{n}x{n}"),
            format!("conv3x3/2 {} relu", s.channels[0]),
            format!("conv3x3/2 {} relu", s.channels[1]),
            format!("conv3x3/2 {} relu", s.channels[2]),
            format!("convT2x2/2 {} relu", s.up_channels[0]),
            format!("convT2x2/2 {} relu", s.up_channels[1]),
            "conv1x1 1 softplus".to_owned(),
            format!("output {0}x{0}", self.output_size()),
        ]
    }

    pub fn init_params<R: Rng>(&self, store: &mut ParamStore, rng: &mut R) {
        let s = &self.spec;
        layers::init_conv(store, "transfer.conv1", 1, s.channels[0], 3, rng);
        layers::init_conv(store, "transfer.conv2", s.channels[0], s.channels[1], 3, rng);
        layers::init_conv(store, "transfer.conv3", s.channels[1], s.channels[2], 3, rng);
        layers::init_conv_transpose(store, "transfer.up1", s.channels[2], s.up_channels[0], 2, rng);
        layers::init_conv_transpose(store, "transfer.up2", s.up_channels[0], s.up_channels[1], 2, rng);
        layers::init_conv(store, "transfer.head", s.up_channels[1], 1, 1, rng);
        // a small positive bias keeps the relu stages active early on
        for name in [
            "transfer.conv1.b",
            "transfer.conv2.b",
            "transfer.conv3.b",
            "transfer.up1.b",
            "transfer.up2.b",
        ] {
            store.get_mut(name).expect("just inserted").data.fill(RELU_BIAS);
        }
        let b = store.get_mut("transfer.head.b").expect("just inserted");
        b.data.fill(inverse_softplus(INITIAL_OUTPUT));
    }

    /// Zeroes the 1x1 head so the output is `softplus(0)` everywhere.
    pub fn zero_head(&self, store: &mut ParamStore) {
        for name in ["transfer.head.w", "transfer.head.b"] {
            if let Some(t) = store.get_mut(name) {
                t.data.fill(0.0);
            }
        }
    }

    /// Records the model on `g` for an input node of shape `[1, S, S]` and
    /// returns the `[N, N]` output node.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, input: Var) -> Result<Var, AutodiffError> {
        self.calls.fetch_add(1, Ordering::Relaxed);
        let mut x = input;
        for name in ["transfer.conv1", "transfer.conv2", "transfer.conv3"] {
            x = layers::conv(g, store, name, x, 2, 1)?;
            x = g.relu(x);
        }
        for name in ["transfer.up1", "transfer.up2"] {
            x = layers::conv_transpose(g, store, name, x, 2, 0)?;
            x = g.relu(x);
        }
        let x = layers::conv(g, store, "transfer.head", x, 1, 0)?;
        let x = g.softplus(x);
        let n = self.output_size();
        Ok(g.reshape(x, vec![n, n]))
    }

    /// Adds `image` to `g` as a constant input node.
    pub fn input_node(&self, g: &mut Graph, image: &SceneImage) -> Result<Var, TransferError> {
        let s = self.spec.input_size;
        if image.channels != 1 || image.width != s || image.height != s {
            return Err(TransferError::ShapeMismatch {
                expected: (s, s),
                actual: (image.height, image.width),
            });
        }
        Ok(g.constant(vec![1, s, s], image.pixels.clone()))
    }

    /// `T_hat = G(image)` for an image already resized to the model input.
    pub fn predict_grid(&self, store: &ParamStore, image: &SceneImage) -> Result<ActivityGrid, TransferError> {
        let mut g = Graph::new();
        let input = self.input_node(&mut g, image)?;
        let out = self.forward(&mut g, store, input)?;
        let n = self.output_size();
        let grid = Grid::from_vec(n, n, g.value(out).to_vec()).expect("square output");
        Ok(ActivityGrid::new(grid).expect("softplus output is non-negative"))
    }
}

/// Sum of squared per-cell differences.
pub fn stl(predicted: &Grid, labels: &Grid) -> Result<f64, TransferError> {
    if predicted.shape() != labels.shape() {
        return Err(TransferError::ShapeMismatch {
            expected: labels.shape(),
            actual: predicted.shape(),
        });
    }
    Ok(predicted
        .data()
        .iter()
        .zip(labels.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum())
}

/// One (image, label grid) training pair.
#[derive(Clone, Debug)]
pub struct TransferPair {
    pub scene: String,
    pub image: SceneImage,
    pub labels: Grid,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransferTrainConfig {
    pub epochs: usize,
    pub optimizer: OptimizerConfig,
}

impl Default for TransferTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            optimizer: OptimizerConfig::adam(1e-3),
        }
    }
}

/// Full-batch STL training of the `transfer.` parameters only. Returns
/// the per-pair losses for every epoch, measured before that epoch's step.
pub fn train_transfer(
    model: &TransferModel,
    store: &mut ParamStore,
    pairs: &[TransferPair],
    cfg: &TransferTrainConfig,
) -> Result<Vec<Vec<f64>>, TransferError> {
    if pairs.is_empty() {
        return Err(TransferError::NoPairs);
    }
    let n = model.output_size();
    for p in pairs {
        if p.labels.shape() != (n, n) {
            return Err(TransferError::ShapeMismatch {
                expected: (n, n),
                actual: p.labels.shape(),
            });
        }
    }
    let mut curve = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        store.zero_grads();
        let mut losses = Vec::with_capacity(pairs.len());
        for p in pairs {
            let mut g = Graph::new();
            let input = model.input_node(&mut g, &p.image)?;
            let out = model.forward(&mut g, store, input)?;
            let target = g.constant(vec![n, n], p.labels.data().to_vec());
            let loss = g.sq_diff_sum(out, target);
            let value = g.scalar(loss);
            if !value.is_finite() {
                return Err(TransferError::NonFiniteLoss {
                    epoch,
                    scene: p.scene.clone(),
                });
            }
            losses.push(value);
            let grads = g.backward_scalar(loss)?;
            store.accumulate_from(&g, &grads, |name| name.starts_with(TRANSFER_PREFIX));
        }
        log::debug!("transfer epoch {epoch}: stl {:?}", losses);
        curve.push(losses);
        optimizer_step(store, &cfg.optimizer)?;
    }
    Ok(curve)
}
