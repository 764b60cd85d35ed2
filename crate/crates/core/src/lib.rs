//! Desk-scale two-stage pretraining for 3D volumes paired with structured
//! reports, plus the frozen-encoder evaluation harness around it.
//!
//! Layering, bottom to top:
//! * [`tensor`], [`rng`], [`autodiff`], [`fd`], [`optim`], [`schedule`]:
//!   numeric substrate (dense arrays, counter-based streams, reverse-mode
//!   tape, finite-difference oracle, AdamW, warmup+cosine schedules).
//! * [`volume`], [`report`]: the two data modalities — phantom volumes with
//!   preprocessing/crops, and structured reports with parsing/entities.
//! * [`nn`]: 3D ViT and text transformer built on the tape.
//! * [`stage1`], [`stage2`]: self-distillation + MLM pretraining, then
//!   image-report contrastive alignment.
//! * [`eval`]: frozen-encoder probes, retrieval, segmentation, grounding.
//! * [`io`]: configs, manifests, checkpoints, logs.

pub mod autodiff;
pub mod box3d;
pub mod corpus;
pub mod eval;
pub mod fd;
pub mod io;
pub mod nn;
pub mod optim;
pub mod report;
pub mod rng;
pub mod schedule;
pub mod stage1;
pub mod stage2;
pub mod tensor;
pub mod volume;
