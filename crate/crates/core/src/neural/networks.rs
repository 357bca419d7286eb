//! The predictor's three networks: context CNN, trajectory history encoder
//! and the context-conditioned decoder.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::autodiff::{AutodiffError, Graph, Var};
use super::layers;
use super::params::ParamStore;
use crate::datasets::{OBS_LEN, PRED_LEN};
use crate::geometry::RealPoint;

#[derive(Debug, Error, PartialEq)]
pub enum NeuralError {
    #[error("shape mismatch: expected {expected:?}, got {actual:?}")]
    ShapeMismatch { expected: Vec<usize>, actual: Vec<usize> },
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

/// Context CNN stack: pool, conv, conv, pool, conv, flatten, dense(tanh).
/// Convolutions use stride 1 with "same" zero padding; pools use
/// stride equal to their window and drop remainders.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContextCnnSpec {
    pub pool1: usize,
    pub conv1_kernel: usize,
    pub conv1_channels: usize,
    pub conv2_kernel: usize,
    pub conv2_channels: usize,
    pub pool2: usize,
    pub conv3_kernel: usize,
    pub conv3_channels: usize,
    pub feature_dim: usize,
}

impl Default for ContextCnnSpec {
    fn default() -> Self {
        Self {
            pool1: 3,
            conv1_kernel: 11,
            conv1_channels: 32,
            conv2_kernel: 3,
            conv2_channels: 32,
            pool2: 3,
            conv3_kernel: 3,
            conv3_channels: 12,
            feature_dim: 64,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistorySpec {
    pub embed_dim: usize,
    pub hidden_dim: usize,
}

impl Default for HistorySpec {
    fn default() -> Self {
        Self {
            embed_dim: 64,
            hidden_dim: 64,
        }
    }
}

/// Hidden widths of the decoder MLP; the output layer always has
/// `2 * PRED_LEN` units.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecoderSpec {
    pub hidden: Vec<usize>,
}

impl Default for DecoderSpec {
    fn default() -> Self {
        Self { hidden: vec![128, 64] }
    }
}

/// Physical transfer encoder-decoder: three stride-2 3x3 convolutions,
/// two stride-2 transposed convolutions and a 1x1 softplus head. The output
/// grid is half the input size.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransferSpec {
    pub input_size: usize,
    pub channels: [usize; 3],
    pub up_channels: [usize; 2],
}

impl Default for TransferSpec {
    fn default() -> Self {
        Self {
            input_size: 200,
            channels: [8, 16, 16],
            up_channels: [16, 8],
        }
    }
}

impl TransferSpec {
    pub fn output_size(&self) -> usize {
        let down = |n: usize| (n - 1) / 2 + 1;
        down(down(down(self.input_size))) * 4
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub grid_rows: usize,
    pub grid_cols: usize,
    pub context: ContextCnnSpec,
    pub history: HistorySpec,
    pub decoder: DecoderSpec,
    pub transfer: TransferSpec,
}

impl Default for NetworkSpec {
    fn default() -> Self {
        Self {
            grid_rows: 100,
            grid_cols: 100,
            context: ContextCnnSpec::default(),
            history: HistorySpec::default(),
            decoder: DecoderSpec::default(),
            transfer: TransferSpec::default(),
        }
    }
}

impl NetworkSpec {
    /// A miniature configuration for gradient checks and fast tests.
    pub fn tiny() -> Self {
        Self {
            grid_rows: 12,
            grid_cols: 12,
            context: ContextCnnSpec {
                pool1: 2,
                conv1_kernel: 3,
                conv1_channels: 2,
                conv2_kernel: 3,
                conv2_channels: 2,
                pool2: 2,
                conv3_kernel: 3,
                conv3_channels: 2,
                feature_dim: 4,
            },
            history: HistorySpec {
                embed_dim: 4,
                hidden_dim: 3,
            },
            decoder: DecoderSpec { hidden: vec![5, 4] },
            transfer: TransferSpec {
                input_size: 24,
                channels: [2, 3, 3],
                up_channels: [3, 2],
            },
        }
    }

    /// Length of the flattened context feature map before the dense layer.
    pub fn context_flatten_dim(&self) -> usize {
        let c = &self.context;
        let rows = self.grid_rows / c.pool1 / c.pool2;
        let cols = self.grid_cols / c.pool1 / c.pool2;
        c.conv3_channels * rows * cols
    }
}

pub const CONTEXT_PREFIX: &str = "context.";
pub const HISTORY_PREFIX: &str = "history.";
pub const DECODER_PREFIX: &str = "decoder.";

/// Context CNN, history encoder and decoder over a shared [`NetworkSpec`].
#[derive(Clone, Debug, PartialEq)]
pub struct Predictor {
    pub spec: NetworkSpec,
}

impl Predictor {
    pub fn new(spec: NetworkSpec) -> Self {
        Self { spec }
    }

    pub fn init_params<R: Rng>(&self, store: &mut ParamStore, rng: &mut R) {
        let c = &self.spec.context;
        layers::init_conv(store, "context.conv1", 1, c.conv1_channels, c.conv1_kernel, rng);
        layers::init_conv(
            store,
            "context.conv2",
            c.conv1_channels,
            c.conv2_channels,
            c.conv2_kernel,
            rng,
        );
        layers::init_conv(
            store,
            "context.conv3",
            c.conv2_channels,
            c.conv3_channels,
            c.conv3_kernel,
            rng,
        );
        layers::init_linear(store, "context.fc", self.spec.context_flatten_dim(), c.feature_dim, rng);

        let h = &self.spec.history;
        layers::init_linear(store, "history.embed", 2, h.embed_dim, rng);
        layers::init_lstm(store, "history.lstm", h.embed_dim, h.hidden_dim, rng);

        let mut width = h.hidden_dim + c.feature_dim;
        for (i, &out) in self.spec.decoder.hidden.iter().enumerate() {
            layers::init_linear(store, &format!("decoder.fc{i}"), width, out, rng);
            width = out;
        }
        layers::init_linear(store, "decoder.out", width, 2 * PRED_LEN, rng);
    }

    /// Context feature `R_c` for a `[rows, cols]` context image.
    pub fn context_feature(&self, g: &mut Graph, store: &ParamStore, context: Var) -> Result<Var, NeuralError> {
        let expected = vec![self.spec.grid_rows, self.spec.grid_cols];
        if g.shape(context) != expected.as_slice() {
            return Err(NeuralError::ShapeMismatch {
                expected,
                actual: g.shape(context).to_vec(),
            });
        }
        let c = &self.spec.context;
        let x = g.reshape(context, vec![1, self.spec.grid_rows, self.spec.grid_cols]);
        let x = g.avg_pool2d(x, c.pool1);
        let x = layers::conv(g, store, "context.conv1", x, 1, c.conv1_kernel / 2)?;
        let x = g.relu(x);
        let x = layers::conv(g, store, "context.conv2", x, 1, c.conv2_kernel / 2)?;
        let x = g.relu(x);
        let x = g.avg_pool2d(x, c.pool2);
        let x = layers::conv(g, store, "context.conv3", x, 1, c.conv3_kernel / 2)?;
        let x = g.relu(x);
        let n = g.len_of(x);
        let x = g.reshape(x, vec![n]);
        let x = layers::linear(g, store, "context.fc", x)?;
        Ok(g.tanh(x))
    }

    /// History feature `R_h`: each observed step, as an offset from the
    /// first observed point, is embedded by a tanh dense layer and fed to the
    /// LSTM; the final hidden state is returned.
    pub fn history_feature(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        observed: &[RealPoint; OBS_LEN],
    ) -> Result<Var, NeuralError> {
        let hd = self.spec.history.hidden_dim;
        let mut h = g.constant(vec![hd], vec![0.0; hd]);
        let mut c = g.constant(vec![hd], vec![0.0; hd]);
        let origin = observed[0];
        for p in observed {
            let x = g.constant(vec![2], vec![p.x - origin.x, p.y - origin.y]);
            let e = layers::linear(g, store, "history.embed", x)?;
            let e = g.tanh(e);
            (h, c) = layers::lstm_step(g, store, "history.lstm", e, h, c)?;
        }
        Ok(h)
    }

    /// Decodes `[R_h, R_c]` into `PRED_LEN` positions, `[PRED_LEN, 2]`, as
    /// offsets added to the last observed position.
    pub fn decode(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        history: Var,
        context: Var,
        last_observed: RealPoint,
    ) -> Result<Var, NeuralError> {
        let mut x = g.concat(&[history, context]);
        for i in 0..self.spec.decoder.hidden.len() {
            x = layers::linear(g, store, &format!("decoder.fc{i}"), x)?;
            x = g.relu(x);
        }
        let offsets = layers::linear(g, store, "decoder.out", x)?;
        let base = g.constant(
            vec![2 * PRED_LEN],
            (0..PRED_LEN).flat_map(|_| [last_observed.x, last_observed.y]).collect(),
        );
        let out = g.add(offsets, base);
        Ok(g.reshape(out, vec![PRED_LEN, 2]))
    }

    /// Full forward pass for one sample given its context image.
    pub fn predict(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        context: Var,
        observed: &[RealPoint; OBS_LEN],
    ) -> Result<Var, NeuralError> {
        let rc = self.context_feature(g, store, context)?;
        let rh = self.history_feature(g, store, observed)?;
        self.decode(g, store, rh, rc, observed[OBS_LEN - 1])
    }
}

/// Reads a `[PRED_LEN, 2]` node back into points.
pub fn points_from(g: &Graph, v: Var) -> [RealPoint; PRED_LEN] {
    let vals = g.value(v);
    std::array::from_fn(|i| RealPoint::new(vals[2 * i], vals[2 * i + 1]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::neural::params::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn zeroed(store: &mut ParamStore) {
        let names: Vec<String> = store.names().map(str::to_owned).collect();
        for n in names {
            store.get_mut(&n).unwrap().data.fill(0.0);
        }
    }

    fn line(n: usize) -> [RealPoint; OBS_LEN] {
        std::array::from_fn(|i| RealPoint::new(i as f64 * 0.4 + n as f64, 1.0 - i as f64 * 0.2))
    }

    #[test]
    fn default_flatten_dim() {
        // 100 -> pool 33 -> pool 11; 12 channels
        assert_eq!(NetworkSpec::default().context_flatten_dim(), 12 * 11 * 11);
        assert_eq!(TransferSpec::default().output_size(), 100);
    }

    #[test]
    fn context_feature_shape_and_range() {
        let p = Predictor::new(NetworkSpec::default());
        let mut store = ParamStore::new();
        p.init_params(&mut store, &mut ChaCha8Rng::seed_from_u64(1));
        let mut g = Graph::new();
        let c = g.constant(
            vec![100, 100],
            (0..10_000).map(|i| ((i * 37) % 200) as f64 / 100.0).collect(),
        );
        let r = p.context_feature(&mut g, &store, c).unwrap();
        assert_eq!(g.len_of(r), 64);
        assert!(g.value(r).iter().all(|v| v.abs() < 1.0));
    }

    #[test]
    fn context_feature_rejects_wrong_shape() {
        let p = Predictor::new(NetworkSpec::tiny());
        let mut store = ParamStore::new();
        p.init_params(&mut store, &mut ChaCha8Rng::seed_from_u64(1));
        let mut g = Graph::new();
        let c = g.constant(vec![10, 12], vec![0.0; 120]);
        assert!(matches!(
            p.context_feature(&mut g, &store, c),
            Err(NeuralError::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn zero_weights_give_zero_features_and_residual_output() {
        let p = Predictor::new(NetworkSpec::tiny());
        let mut store = ParamStore::new();
        p.init_params(&mut store, &mut ChaCha8Rng::seed_from_u64(3));
        zeroed(&mut store);
        let mut g = Graph::new();
        let c = g.constant(vec![12, 12], vec![0.7; 144]);
        let rc = p.context_feature(&mut g, &store, c).unwrap();
        assert!(g.value(rc).iter().all(|v| *v == 0.0));
        let obs = line(2);
        let rh = p.history_feature(&mut g, &store, &obs).unwrap();
        assert!(g.value(rh).iter().all(|v| *v == 0.0));
        let y = p.decode(&mut g, &store, rh, rc, obs[7]).unwrap();
        assert_eq!(g.shape(y), &[PRED_LEN, 2]);
        assert!(points_from(&g, y).iter().all(|q| *q == obs[7]));
    }

    #[test]
    fn forward_is_bitwise_reproducible() {
        let run = || {
            let p = Predictor::new(NetworkSpec::default());
            let mut store = ParamStore::new();
            p.init_params(&mut store, &mut ChaCha8Rng::seed_from_u64(11));
            let mut g = Graph::new();
            let c = g.constant(vec![100, 100], (0..10_000).map(|i| (i as f64 * 0.013).sin()).collect());
            let y = p.predict(&mut g, &store, c, &line(0)).unwrap();
            g.value(y).iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn single_lstm_step_matches_hand_arithmetic() {
        // 1-d input, 1-d hidden, gates (i, f, g, o).
        let (wi, wf, wg, wo) = (0.5, -0.3, 0.8, 0.2);
        let (ui, uf, ug, uo) = (0.1, 0.4, -0.6, 0.7);
        let (bi, bf, bg, bo) = (0.05, 0.6, -0.1, 0.0);
        let (x, h0, c0) = (1.5, -0.4, 0.9);
        let mut store = ParamStore::new();
        store.insert("l.w_ih", Tensor::new(vec![4, 1], vec![wi, wf, wg, wo]));
        store.insert("l.w_hh", Tensor::new(vec![4, 1], vec![ui, uf, ug, uo]));
        store.insert("l.b", Tensor::new(vec![4], vec![bi, bf, bg, bo]));
        let mut g = Graph::new();
        let xv = g.constant(vec![1], vec![x]);
        let hv = g.constant(vec![1], vec![h0]);
        let cv = g.constant(vec![1], vec![c0]);
        let (h1, c1) = layers::lstm_step(&mut g, &store, "l", xv, hv, cv).unwrap();

        let sig = |z: f64| 1.0 / (1.0 + (-z).exp());
        let i = sig(wi * x + ui * h0 + bi);
        let f = sig(wf * x + uf * h0 + bf);
        let cand = (wg * x + ug * h0 + bg).tanh();
        let o = sig(wo * x + uo * h0 + bo);
        let c_want = f * c0 + i * cand;
        let h_want = o * c_want.tanh();
        assert!((g.scalar(c1) - c_want).abs() < 1e-14);
        assert!((g.scalar(h1) - h_want).abs() < 1e-14);
    }

    #[test]
    fn tiny_decoder_matches_matrix_arithmetic() {
        // Decoder with one hidden layer of width 2 on 2-d features.
        let spec = NetworkSpec {
            decoder: DecoderSpec { hidden: vec![2] },
            history: HistorySpec {
                embed_dim: 1,
                hidden_dim: 1,
            },
            context: ContextCnnSpec {
                feature_dim: 1,
                ..NetworkSpec::tiny().context
            },
            ..NetworkSpec::tiny()
        };
        let p = Predictor::new(spec);
        let mut store = ParamStore::new();
        p.init_params(&mut store, &mut ChaCha8Rng::seed_from_u64(5));
        let w0 = [0.5, -1.0, 2.0, 0.25];
        let b0 = [0.1, -3.0];
        store.insert("decoder.fc0.w", Tensor::new(vec![2, 2], w0.to_vec()));
        store.insert("decoder.fc0.b", Tensor::new(vec![2], b0.to_vec()));
        let wout: Vec<f64> = (0..48).map(|i| (i as f64 - 20.0) * 0.1).collect();
        let bout: Vec<f64> = (0..24).map(|i| i as f64 * 0.01).collect();
        store.insert("decoder.out.w", Tensor::new(vec![24, 2], wout.clone()));
        store.insert("decoder.out.b", Tensor::new(vec![24], bout.clone()));

        let (rh, rc) = (0.8, -0.6);
        let mut g = Graph::new();
        let hv = g.constant(vec![1], vec![rh]);
        let cv = g.constant(vec![1], vec![rc]);
        let last = RealPoint::new(10.0, -2.0);
        let y = p.decode(&mut g, &store, hv, cv, last).unwrap();

        let hidden: Vec<f64> = (0..2)
            .map(|r| (w0[2 * r] * rh + w0[2 * r + 1] * rc + b0[r]).max(0.0))
            .collect();
        for k in 0..24 {
            let o = wout[2 * k] * hidden[0] + wout[2 * k + 1] * hidden[1] + bout[k];
            let want = o + if k % 2 == 0 { last.x } else { last.y };
            assert!((g.value(y)[k] - want).abs() < 1e-12);
        }
    }
}
