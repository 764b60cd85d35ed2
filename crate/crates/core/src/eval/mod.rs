//! Frozen-encoder downstream harness: sliding-window embedding extraction,
//! MLP probing, retrieval metrics, a skip-connected segmentation decoder,
//! and text-grounded box regression.

pub mod ground;
pub mod metrics;
pub mod probe;
pub mod retrieval;
pub mod seg;
pub mod window;

use crate::autodiff::AutodiffError;
use crate::nn::NnError;
use crate::optim::OptimError;
use crate::schedule::ScheduleError;
use crate::tensor::TensorError;
use crate::volume::VolumeError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Volume(#[from] VolumeError),
    #[error(transparent)]
    Optim(#[from] OptimError),
    #[error(transparent)]
    Schedule(#[from] ScheduleError),
    #[error(transparent)]
    Box3d(#[from] crate::box3d::BoxError),
    #[error("window {window:?} exceeds volume {volume:?} on axis {axis}")]
    WindowTooLarge { window: [usize; 3], volume: [usize; 3], axis: usize },
    #[error("bad config: {0}")]
    BadConfig(String),
    #[error("encoder parameters changed during a frozen-encoder operation")]
    EncoderMutated,
    #[error("empty input: {0}")]
    EmptyInput(&'static str),
    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("only one class present; need both for ranking metrics")]
    SingleClass,
    #[error("candidate {0} missing from the index")]
    UnknownCandidate(String),
    #[error("candidate {0} has no category")]
    MissingCategory(String),
    #[error("top-{n} requested from a corpus of {corpus}")]
    CutoffTooLarge { n: usize, corpus: usize },
    #[error("train/val/test splits overlap at item {0}")]
    SplitOverlap(usize),
    #[error("non-finite loss {value} at step {step}")]
    NonFiniteLoss { step: u64, value: f64 },
}
