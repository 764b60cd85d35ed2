//! Synthetic study corpus: phantoms arranged in a fixed set of layout
//! classes, each study with 1-4 acquired series, a paired report, and an
//! exact truth file. Fully deterministic in the corpus seed.
//!
//! Layout classes are organ *arrangements*: several classes share the same
//! entity set and differ only in which slot each organ occupies, so class
//! identity is recoverable from voxels (positions are visible) but not from
//! global intensity statistics alone.

use crate::io::manifest::{save_truth, DatasetManifest, ManifestEntry};
use crate::io::volume_file::save_volume;
use crate::io::IoError;
use crate::report::entity::OrganEntityTable;
use crate::report::generate::generate_synthetic_report;
use crate::rng::stream_rng;
use crate::volume::phantom::{generate_phantom, OrganSpec, PathologySpec, PhantomSpec};
use crate::volume::VolumeError;
use crate::box3d::VoxelBox;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use std::path::Path;

pub const MAX_LAYOUTS: usize = 8;
pub const STYLES: [&str; 4] = ["T1", "T2", "FLAIR", "DWI"];
pub const PATHOLOGY_LABELS: [&str; 3] = ["lesion", "cyst", "mass"];

/// (entity, slot) pairs per layout class. Slots are corners of the axial
/// plane; classes 0/1 and 2/3 are arrangement-swapped twins.
const LAYOUTS: [[(&str, usize); 2]; MAX_LAYOUTS] = [
    [("LIVER", 0), ("KIDNEY", 3)],
    [("LIVER", 3), ("KIDNEY", 0)],
    [("SPLEEN", 0), ("PANCREAS", 3)],
    [("SPLEEN", 3), ("PANCREAS", 0)],
    [("LIVER", 1), ("SPLEEN", 2)],
    [("KIDNEY", 1), ("PANCREAS", 2)],
    [("LIVER", 2), ("PANCREAS", 1)],
    [("KIDNEY", 2), ("SPLEEN", 1)],
];

/// Axial-plane slot centers as extent fractions.
const SLOTS: [[f64; 3]; 4] = [
    [0.28, 0.30, 0.5],
    [0.72, 0.30, 0.5],
    [0.28, 0.70, 0.5],
    [0.72, 0.70, 0.5],
];

fn texture_of(entity: &str) -> f64 {
    match entity {
        "LIVER" => 0.35,
        "KIDNEY" => 0.55,
        "SPLEEN" => 0.8,
        "PANCREAS" => 1.1,
        _ => 0.45,
    }
}

#[derive(Debug, Clone)]
pub struct CorpusSpec {
    pub studies: usize,
    pub extents: [usize; 3],
    pub spacing: [f64; 3],
    /// Layout classes in use (<= MAX_LAYOUTS); studies cycle through them.
    pub layouts: usize,
    pub noise: f64,
    /// Inclusive series count range per study.
    pub series: (usize, usize),
    pub pathology_prob: f64,
    /// Site tags assigned round-robin; empty leaves `group` unset.
    pub groups: Vec<String>,
    pub seed: u64,
}

impl Default for CorpusSpec {
    fn default() -> CorpusSpec {
        CorpusSpec {
            studies: 16,
            extents: [96, 96, 24],
            spacing: [1.0, 1.0, 2.0],
            layouts: 4,
            noise: 0.02,
            series: (1, 4),
            pathology_prob: 0.3,
            groups: Vec::new(),
            seed: 0,
        }
    }
}

impl CorpusSpec {
    pub fn validate(&self) -> Result<(), VolumeError> {
        let bad = |reason: String| VolumeError::Invalid { id: "corpus".into(), reason };
        if self.studies == 0 {
            return Err(bad("studies must be >= 1".into()));
        }
        if self.layouts == 0 || self.layouts > MAX_LAYOUTS {
            return Err(bad(format!("layouts must be in 1..={MAX_LAYOUTS}")));
        }
        if self.series.0 == 0 || self.series.0 > self.series.1 {
            return Err(bad(format!("bad series range {:?}", self.series)));
        }
        if self.extents.iter().any(|&e| e < 16) {
            return Err(bad("extents must be at least 16 voxels per axis".into()));
        }
        if !(0.0..=1.0).contains(&self.pathology_prob) {
            return Err(bad("pathology_prob outside [0,1]".into()));
        }
        Ok(())
    }
}

/// One study's phantom spec for a given series. Geometry (organs,
/// pathologies) is independent of the series index; only the noise seed and
/// style tag differ, so every series shares the study's truth.
pub fn study_spec(spec: &CorpusSpec, study_idx: usize, series_idx: usize) -> PhantomSpec {
    let mut rng = stream_rng(spec.seed, "corpus-study", &[study_idx as u64]);
    let layout = study_idx % spec.layouts;
    let e = spec.extents;

    let mut organs = Vec::new();
    for &(entity, slot) in &LAYOUTS[layout] {
        let mut center = [0.0; 3];
        let mut radii = [0.0; 3];
        let base_r = [0.16 * e[0] as f64, 0.16 * e[1] as f64, 0.26 * e[2] as f64];
        for a in 0..3 {
            let jitter = rng.gen_range(-0.03..0.03) * e[a] as f64;
            center[a] = SLOTS[slot][a] * e[a] as f64 + jitter;
            radii[a] = base_r[a] * rng.gen_range(0.88..1.12);
            // Clamp inside the grid with a one-voxel margin.
            let max_c = e[a] as f64 - 1.0 - radii[a];
            center[a] = center[a].clamp(radii[a].min(max_c), max_c.max(radii[a]));
        }
        organs.push(OrganSpec {
            entity: entity.to_string(),
            center,
            radii,
            intensity: 0.55 + rng.gen_range(-0.05..0.05),
            texture_freq: texture_of(entity),
        });
    }

    let mut pathologies = Vec::new();
    if rng.gen::<f64>() < spec.pathology_prob {
        let organ = rng.gen_range(0..organs.len());
        let o = &organs[organ];
        let label = PATHOLOGY_LABELS[rng.gen_range(0..PATHOLOGY_LABELS.len())];
        let mut lo = [0usize; 3];
        let mut hi = [0usize; 3];
        for a in 0..3 {
            let half = (o.radii[a] * 0.35).max(1.0);
            let c = o.center[a] + rng.gen_range(-0.25..0.25) * o.radii[a];
            lo[a] = (c - half).floor().max(0.0) as usize;
            hi[a] = ((c + half).ceil() as usize).min(spec.extents[a]).max(lo[a] + 1);
        }
        pathologies.push(PathologySpec {
            label: label.to_string(),
            organ,
            region: VoxelBox { lo, hi },
            intensity_delta: 0.25,
        });
    }

    // Series-specific knobs only below this line.
    let style = STYLES[series_idx % STYLES.len()];
    PhantomSpec {
        id: format!("study{study_idx:04}_s{series_idx}"),
        extents: e,
        spacing: spec.spacing,
        organs,
        pathologies,
        style: style.to_string(),
        noise: spec.noise,
        seed: spec
            .seed
            .wrapping_mul(0x9e37_79b9_7f4a_7c15)
            .wrapping_add((study_idx as u64) << 8)
            .wrapping_add(series_idx as u64),
    }
}

fn series_count(spec: &CorpusSpec, rng: &mut ChaCha8Rng) -> usize {
    if spec.series.0 == spec.series.1 {
        spec.series.0
    } else {
        rng.gen_range(spec.series.0..=spec.series.1)
    }
}

/// Write the whole corpus under `root`: volumes/, reports/, truth/ and
/// manifest.json. Returns the manifest.
pub fn build_corpus(root: &Path, spec: &CorpusSpec) -> Result<DatasetManifest, IoError> {
    spec.validate()?;
    let table = OrganEntityTable::builtin();
    for sub in ["volumes", "reports", "truth"] {
        std::fs::create_dir_all(root.join(sub))
            .map_err(|source| IoError::Write { path: root.join(sub), source })?;
    }

    let mut entries = Vec::new();
    for idx in 0..spec.studies {
        let study = format!("study{idx:04}");
        let mut rng = stream_rng(spec.seed, "corpus-series", &[idx as u64]);
        let count = series_count(spec, &mut rng);

        let mut volumes = Vec::new();
        let mut truth = None;
        for s in 0..count {
            let ps = study_spec(spec, idx, s);
            let (vol, t) = generate_phantom(&ps)?;
            let rel = format!("volumes/{study}_s{s}.vol");
            save_volume(root.join(&rel), &vol)?;
            volumes.push(rel);
            if s == 0 {
                truth = Some(t);
            }
        }
        let truth = truth.expect("series.0 >= 1");

        let report_rel = format!("reports/{study}.txt");
        let text = generate_synthetic_report(&study, &truth, &table, spec.seed ^ idx as u64);
        std::fs::write(root.join(&report_rel), &text)
            .map_err(|source| IoError::Write { path: root.join(&report_rel), source })?;

        let truth_rel = format!("truth/{study}.truth.json");
        save_truth(root.join(&truth_rel), &truth)?;

        let group = if spec.groups.is_empty() {
            None
        } else {
            Some(spec.groups[idx % spec.groups.len()].clone())
        };
        entries.push(ManifestEntry {
            study,
            volumes,
            report: report_rel,
            organs: truth.entity_set().into_iter().collect(),
            truth: Some(truth_rel),
            class: Some(idx % spec.layouts),
            group,
        });
    }

    let manifest = DatasetManifest::from_entries(entries);
    manifest.save(root.join("manifest.json"))?;
    Ok(manifest)
}
