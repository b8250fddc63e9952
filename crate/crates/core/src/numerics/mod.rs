//! Dense `f64` tensors, a recording tape for reverse-mode differentiation,
//! the neural-network operations the transformer stacks are built from, Adam,
//! and the checkpoint container.

mod checkpoint;
pub mod gradcheck;
pub mod kernels;
mod optim;
mod params;
mod tape;
mod tensor;

pub use checkpoint::{Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use kernels::{cross_entropy, is_blocked, layer_norm, masked_softmax, matmul, matmul_nt, transpose};
pub use optim::{adam_step, Adam, AdamConfig, AdamMoments};
pub use params::{Gradients, ParamId, ParamStore};
pub use tape::{Tape, Var};
pub use tensor::Tensor;

/// Additive mask value standing in for −∞. `exp` of anything this negative
/// is exactly zero in `f64`.
pub const MASK_NEG: f64 = -1e9;

#[derive(Debug, thiserror::Error)]
pub enum NumericsError {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("invalid shape {0:?}")]
    InvalidShape(Vec<usize>),
    #[error("shape {shape:?} does not hold {len} values")]
    LengthMismatch { shape: Vec<usize>, len: usize },
    #[error("non-finite value in {op} at index {index}")]
    NonFinite { op: &'static str, index: usize },
    #[error("target index {target} out of range for {classes} classes")]
    TargetOutOfRange { target: usize, classes: usize },
    #[error("{0}")]
    InvalidArgument(&'static str),
    #[error("duplicate parameter name {0}")]
    DuplicateParam(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
