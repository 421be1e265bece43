//! Differentiable computation core: a reverse-mode tape over dense matrices,
//! feed-forward networks, the Adam optimizer and a binary checkpoint container.
//!
//! All arithmetic is `f64`. Tensors are `rows × cols` matrices where rows
//! index the batch.

mod adam;
mod checkpoint;
mod gradcheck;
mod graph;
mod nn;

pub use adam::{clip_global_norm, Adam, AdamConfig, StepOutcome};
pub use checkpoint::Checkpoint;
pub use gradcheck::{central_difference, gradient_mismatch};
pub use graph::{Gradients, Graph, Var};
pub use nn::{
    sinusoidal_features, Activation, Linear, Mlp, MlpSpec, MlpVars, Parameterized, StepEmbedding,
};

/// Dense `rows × cols` tensor of finite reals.
pub type Tensor = ndarray::Array2<f64>;

#[derive(Debug, thiserror::Error)]
pub enum NumericsError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("malformed checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Logistic function, stable for large `|x|`.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln σ(x)` without overflow.
pub fn log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}
