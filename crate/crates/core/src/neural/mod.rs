//! Minimal reverse-mode tensor engine and the network blocks built on it.

pub mod autodiff;
pub mod kernels;
pub mod layers;
pub mod networks;
pub mod optim;
pub mod params;

pub use autodiff::{bilinear, AutodiffError, BackwardCtx, BackwardFn, Gradients, Graph, Var};
pub use networks::{
    points_from, ContextCnnSpec, DecoderSpec, HistorySpec, NetworkSpec, NeuralError, Predictor, TransferSpec,
};
pub use optim::{optimizer_step, OptimError, OptimizerConfig, OptimizerKind};
pub use params::{load_metadata, CheckpointError, ParamStore, Tensor};
