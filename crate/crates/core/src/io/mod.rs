//! On-disk formats: flat key-value configs, binary checkpoints, dataset
//! manifests, raw volume buffers, and JSONL/CSV metric emitters.

pub mod checkpoint;
pub mod config;
pub mod emit;
pub mod manifest;
pub mod volume_file;

use crate::nn::NnError;
use crate::report::ReportError;
use crate::volume::VolumeError;
use std::path::PathBuf;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum IoError {
    #[error("reading {path}: {source}")]
    Read {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("writing {path}: {source}")]
    Write {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {reason}")]
    Parse { path: PathBuf, line: usize, reason: String },
    #[error("{path}: unknown keys: {}", keys.join(", "))]
    UnknownKeys { path: PathBuf, keys: Vec<String> },
    #[error("missing config key '{key}'")]
    MissingKey { key: String },
    #[error("config key '{key}' = '{value}': expected {want}")]
    BadValue { key: String, value: String, want: String },
    #[error("include cycle through {path}")]
    IncludeCycle { path: PathBuf },
    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("{path}: not a checkpoint file (bad magic)")]
    BadMagic { path: PathBuf },
    #[error("{path}: checkpoint format version {found}, expected {want}")]
    BadVersion { path: PathBuf, found: u32, want: u32 },
    #[error("{path}: truncated or corrupt ({what})")]
    Truncated { path: PathBuf, what: String },
    #[error("checksum mismatch on record '{record}'")]
    Checksum { record: String },
    #[error("duplicate tensor record '{name}'")]
    DuplicateRecord { name: String },
    #[error("checkpoint float mode {found} does not match configured {want}")]
    ModeMismatch { found: String, want: String },
    #[error("checkpoint config snapshot differs from the supplied config (pass --force to override)")]
    ConfigMismatch,
    #[error("checkpoint kind '{found}' where '{want}' is required")]
    KindMismatch { found: String, want: String },
    #[error("checkpoint is missing record '{name}'")]
    MissingRecord { name: String },
    #[error("duplicate study id '{0}' in manifest")]
    DuplicateStudy(String),
    #[error("study '{study}': referenced file {path} is missing")]
    MissingFile { study: String, path: PathBuf },
    #[error("study '{study}': organ list in manifest does not match the report ({detail})")]
    OrganMismatch { study: String, detail: String },
    #[error(transparent)]
    Report(#[from] ReportError),
    #[error(transparent)]
    Volume(#[from] VolumeError),
    #[error(transparent)]
    Nn(#[from] NnError),
}
