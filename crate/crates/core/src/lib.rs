//! Coarse-to-fine scalar field prediction.
//!
//! Learns per-pixel predictions of a scalar field (for example solar-induced
//! fluorescence) from tile-level averages only. The centerpiece is a small
//! U-Net trained with a coarse aggregation loss plus a land-cover-gated
//! pairwise smoothness regularizer and early stopping; statistical baselines
//! (ridge regression on tile-average features, a per-pixel MLP, a trivial
//! predictor) and a synthetic tile generator with known ground truth make the
//! comparison reproducible end to end.
//!
//! The numeric core is generic over [`scalar::Scalar`] (f32 or f64); the
//! pipeline types below fix f64, which everything shipped (CLI, training,
//! evaluation) uses.

pub mod autodiff;
pub mod baselines;
pub mod data;
pub mod error;
pub mod eval;
pub mod losses;
pub mod model;
pub mod checkpoint;
pub mod experiment;
pub mod optim;
pub mod train;
pub mod scalar;
pub mod tensor;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Dense f64 tensor, the pipeline's working type.
pub type Tensor = tensor::TensorBase<f64>;
/// Autodiff graph over f64 tensors.
pub type Graph = autodiff::Graph<f64>;
/// Model parameters in f64.
pub type ModelParams = model::ModelParams<f64>;
/// Gradient buffers in f64.
pub type GradSet = model::GradSet<f64>;
