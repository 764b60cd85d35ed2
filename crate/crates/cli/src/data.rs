//! Dataset plumbing shared by the commands: preprocessing, frozen-encoder
//! embedding, and manifest-to-sample conversion.

use crate::settings::Preproc;
use anyhow::{bail, Context, Result};
use std::path::Path;
use voxrep_core::io::checkpoint::Checkpoint;
use voxrep_core::io::manifest::{load_report, DatasetManifest, ManifestEntry};
use voxrep_core::io::volume_file::load_volume;
use voxrep_core::nn::params::ParamSet;
use voxrep_core::nn::text::Vocab;
use voxrep_core::report::entity::OrganEntityTable;
use voxrep_core::report::StructuredReport;
use voxrep_core::stage2::StudySample;
use voxrep_core::tensor::FloatMode;
use voxrep_core::volume::preprocess::{otsu_foreground_crop, percentile_rescale, resample_trilinear};
use voxrep_core::volume::Volume;

/// Foreground crop then percentile intensity rescale.
pub fn preprocess(v: &Volume, pre: &Preproc) -> Volume {
    let cropped = if pre.otsu { otsu_foreground_crop(v).0 } else { v.clone() };
    percentile_rescale(&cropped, pre.rescale.0, pre.rescale.1)
}

/// Preprocess and bring to a fixed grid (evaluation paths need canonical
/// extents for window tiling and patch divisibility).
pub fn preprocess_to(v: &Volume, pre: &Preproc, extents: [usize; 3]) -> Result<Volume> {
    let p = preprocess(v, pre);
    if p.extents() == extents {
        return Ok(p);
    }
    Ok(resample_trilinear(&p, extents)?)
}

pub fn first_series(root: &Path, entry: &ManifestEntry) -> Result<Volume> {
    let rel = entry
        .volumes
        .first()
        .with_context(|| format!("study '{}' lists no volumes", entry.study))?;
    Ok(load_volume(root.join(rel))?)
}

pub fn full_report_text(report: &StructuredReport) -> String {
    report
        .sections
        .iter()
        .map(|s| s.details.as_str())
        .collect::<Vec<_>>()
        .join("\n")
}

/// Raw report file texts in manifest order (MLM corpus and vocab source).
pub fn report_texts(root: &Path, manifest: &DatasetManifest) -> Result<Vec<String>> {
    manifest
        .entries
        .iter()
        .map(|e| {
            std::fs::read_to_string(root.join(&e.report))
                .with_context(|| format!("reading report of '{}'", e.study))
        })
        .collect()
}

/// Manifest rows as stage-2 sampler inputs; `series` holds the volume file
/// paths relative to the dataset root.
pub fn study_samples(root: &Path, manifest: &DatasetManifest) -> Result<Vec<StudySample>> {
    let table = OrganEntityTable::builtin();
    let mut out = Vec::with_capacity(manifest.entries.len());
    for e in &manifest.entries {
        let report = load_report(root, &e.report, &table)?;
        let sample = StudySample::from_report(&e.study, e.volumes.clone(), report);
        sample.validate()?;
        out.push(sample);
    }
    Ok(out)
}

/// The frozen vision encoder from a checkpoint, as a ParamSet whose names
/// keep the `vis.` prefix. Stage-1 checkpoints contribute the teacher.
pub fn frozen_vision(ck: &Checkpoint, mode: FloatMode) -> Result<ParamSet> {
    let source = match ck.meta.kind.as_str() {
        "stage1" => "teacher",
        "stage2" => "model",
        other => bail!("checkpoint kind '{other}' has no vision encoder"),
    };
    let all = ck.param_set(source, mode)?;
    let mut out = ParamSet::new(mode);
    for (name, t) in all.iter() {
        if name.starts_with("vis.") {
            out.insert(name.clone(), t.clone());
        }
    }
    if out.is_empty() {
        bail!("checkpoint has no 'vis.*' tensors under '{source}'");
    }
    Ok(out)
}

/// Text encoder (and for stage-2, projection heads) with prefixes kept.
pub fn frozen_text(ck: &Checkpoint, mode: FloatMode) -> Result<ParamSet> {
    let source = match ck.meta.kind.as_str() {
        "mlm" => "model",
        "stage2" => "model",
        other => bail!("checkpoint kind '{other}' has no text encoder"),
    };
    let all = ck.param_set(source, mode)?;
    let mut out = ParamSet::new(mode);
    for (name, t) in all.iter() {
        if name.starts_with("txt.") {
            out.insert(name.clone(), t.clone());
        }
    }
    if out.is_empty() {
        bail!("checkpoint has no 'txt.*' tensors under '{source}'");
    }
    Ok(out)
}

pub fn vocab_from_checkpoint(ck: &Checkpoint) -> Result<Vocab> {
    let lines = ck
        .meta
        .extra
        .get("vocab")
        .context("checkpoint metadata has no embedded vocabulary")?;
    Ok(Vocab::from_lines(lines)?)
}
