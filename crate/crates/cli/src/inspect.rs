//! Checkpoint inspection: metadata and the tensor table, no weights.

use anyhow::Result;
use std::fmt::Write;
use std::path::Path;
use voxrep_core::io::checkpoint::Checkpoint;

pub fn cmd_inspect(path: &Path) -> Result<String> {
    let ck = Checkpoint::load(path)?;
    let mut s = String::new();
    writeln!(s, "kind: {}", ck.meta.kind)?;
    writeln!(s, "mode: {}", ck.meta.mode.name())?;
    writeln!(s, "step: {}", ck.meta.step)?;
    writeln!(s, "seed: {}", ck.meta.seed)?;
    for key in ck.meta.extra.keys() {
        writeln!(s, "extra: {key} ({} bytes)", ck.meta.extra[key].len())?;
    }
    let config_lines = ck.meta.config.lines().count();
    writeln!(s, "config: {config_lines} keys")?;
    writeln!(s, "tensors: {}", ck.tensors.len())?;
    let scalars: usize = ck.tensors.values().map(|t| t.len()).sum();
    writeln!(s, "scalars: {scalars}")?;
    for (name, t) in &ck.tensors {
        writeln!(s, "  {name}  {:?}", t.shape())?;
    }
    Ok(s)
}
