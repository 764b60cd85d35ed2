//! Synthetic corpus generation command.

use crate::settings;
use anyhow::{bail, Context, Result};
use std::path::{Path, PathBuf};
use voxrep_core::corpus::build_corpus;
use voxrep_core::io::config::Config;

#[derive(Debug, Clone)]
pub struct SynthArgs {
    pub config: PathBuf,
    pub out: PathBuf,
    pub overwrite: bool,
}

fn dir_is_empty(path: &Path) -> Result<bool> {
    Ok(std::fs::read_dir(path)
        .with_context(|| format!("reading {}", path.display()))?
        .next()
        .is_none())
}

/// Generate phantoms, reports, truth records, and the manifest under the
/// output directory. Refuses a non-empty target unless told to overwrite.
pub fn cmd_synthesize(args: &SynthArgs) -> Result<PathBuf> {
    let mut cfg = Config::load(&args.config)?;
    let common = settings::common(&mut cfg)?;
    let synth = settings::synth_settings(&mut cfg, common.seed)?;
    settings::finish(cfg, &["run", "synth"])?;

    let out = settings::resolve_out(&args.out);
    if out.exists() && !dir_is_empty(&out)? {
        if !args.overwrite {
            bail!("{} is not empty; pass --overwrite to regenerate into it", out.display());
        }
    } else {
        std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    }
    build_corpus(&out, &synth.spec)?;
    Ok(out)
}
