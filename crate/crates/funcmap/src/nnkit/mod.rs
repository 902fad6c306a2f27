//! Minimal reverse-mode autodiff kernel library.
//!
//! Exactly the layer set the models in this crate need: conv1d, batch norm,
//! exact GELU, max/adaptive-average pooling, linear, layer norm, dropout,
//! masked multi-head attention, AdamW with parameter groups and a
//! reduce-on-plateau scheduler. Kernels are generic over [`Scalar`] so
//! training runs in f32 while gradient checks run in f64.

pub mod attention;
pub mod checkpoint;
pub mod gradcheck;
pub mod layers;
pub mod ops;
pub mod optim;
pub mod tape;

pub use attention::multi_head_attention;
pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use gradcheck::check_gradients;
pub use layers::{
    AdaptiveAvgPool1d, BatchNorm1d, Conv1d, Dropout, LayerNorm, Linear, MaxPool1d, Mode,
    ParamStore, Session,
};
pub use optim::{AdamW, AdamWConfig, PlateauScheduler};
pub use tape::{Tape, Var};

use ndarray::{LinalgScalar, ScalarOperand};
use num_traits::{Float, FromPrimitive, NumAssign};

/// Element type for tensors: f32 for training, f64 for gradient checks.
pub trait Scalar:
    Float
    + FromPrimitive
    + NumAssign
    + LinalgScalar
    + ScalarOperand
    + Send
    + Sync
    + std::fmt::Debug
    + std::fmt::Display
    + std::iter::Sum
    + 'static
{
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn erf(self) -> Self;
}

impl Scalar for f32 {
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
    fn erf(self) -> Self {
        statrs::function::erf::erf(self as f64) as f32
    }
}

impl Scalar for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }
    fn to_f64(self) -> f64 {
        self
    }
    fn erf(self) -> Self {
        statrs::function::erf::erf(self)
    }
}

#[derive(Debug, thiserror::Error)]
pub enum NnError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("attention query {query} has every key masked")]
    AllKeysMasked { query: usize },
    #[error("non-finite loss (diverged)")]
    NonFiniteLoss,
    #[error("learning rate must be positive, got {0}")]
    BadLearningRate(f64),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
}
