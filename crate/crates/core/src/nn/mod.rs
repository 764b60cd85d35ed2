//! Model components built on the autodiff tape: named parameter trees, the
//! shared pre-norm transformer block, the 3D patch ViT, the text encoder,
//! and the projection heads.

pub mod block;
pub mod head;
pub mod params;
pub mod text;
pub mod vit;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum NnError {
    #[error(transparent)]
    Autodiff(#[from] crate::autodiff::AutodiffError),
    #[error(transparent)]
    Tensor(#[from] crate::tensor::TensorError),
    #[error("missing parameter '{0}'")]
    MissingParam(String),
    #[error("parameter trees differ: {0}")]
    StructureMismatch(String),
    #[error("volume extent {extent} on axis {axis} not divisible by patch {patch}")]
    PatchDivisibility { axis: usize, extent: usize, patch: usize },
    #[error("invalid config: {0}")]
    BadConfig(String),
    #[error("sequence length {len} exceeds maximum {max}")]
    Overlength { len: usize, max: usize },
    #[error("mask plan addresses token {token} of {count}")]
    MaskOutOfRange { token: usize, count: usize },
}
