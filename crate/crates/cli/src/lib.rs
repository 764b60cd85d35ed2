//! Library surface of the `voxrep` binary. Every subcommand is an ordinary
//! function here so integration tests can drive the full pipeline in-process.

pub mod data;
pub mod evals;
pub mod inspect;
pub mod settings;
pub mod synth;
pub mod train;
