//! Dataset manifests: a JSON index of studies with their volume series,
//! report, organ entities, truth file, and corpus-level stats.

use super::volume_file::load_volume;
use super::IoError;
use crate::report::entity::OrganEntityTable;
use crate::report::parse::parse_report;
use crate::report::StructuredReport;
use crate::volume::phantom::PhantomTruth;
use crate::volume::Volume;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub study: String,
    /// Volume files, one per acquired series, relative to the dataset root.
    pub volumes: Vec<String>,
    pub report: String,
    /// Canonical organ entities present in the study.
    pub organs: Vec<String>,
    pub truth: Option<String>,
    /// Class index for layout-classification tasks.
    pub class: Option<usize>,
    /// Grouping attribute for grouped-split evaluations (e.g. a site tag).
    pub group: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub studies: usize,
    pub series: usize,
    pub organ_counts: BTreeMap<String, usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub entries: Vec<ManifestEntry>,
    pub stats: CorpusStats,
}

impl DatasetManifest {
    pub fn from_entries(entries: Vec<ManifestEntry>) -> DatasetManifest {
        let mut stats = CorpusStats { studies: entries.len(), ..CorpusStats::default() };
        for e in &entries {
            stats.series += e.volumes.len();
            for organ in &e.organs {
                *stats.organ_counts.entry(organ.clone()).or_insert(0) += 1;
            }
        }
        DatasetManifest { entries, stats }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), IoError> {
        let path = path.as_ref();
        let json = serde_json::to_string_pretty(self)
            .map_err(|source| IoError::Json { path: path.into(), source })?;
        std::fs::write(path, json + "\n").map_err(|source| IoError::Write { path: path.into(), source })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<DatasetManifest, IoError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|source| IoError::Read { path: path.into(), source })?;
        serde_json::from_str(&text).map_err(|source| IoError::Json { path: path.into(), source })
    }

    /// Structural validation: unique study ids, every referenced file
    /// exists, reports parse, and the organ list matches the parsed report.
    pub fn validate(&self, root: &Path, table: &OrganEntityTable) -> Result<(), IoError> {
        let mut seen = BTreeSet::new();
        for e in &self.entries {
            if !seen.insert(e.study.clone()) {
                return Err(IoError::DuplicateStudy(e.study.clone()));
            }
            let mut paths: Vec<&String> = e.volumes.iter().collect();
            paths.push(&e.report);
            if let Some(t) = &e.truth {
                paths.push(t);
            }
            for rel in paths {
                let p = root.join(rel);
                if !p.is_file() {
                    return Err(IoError::MissingFile { study: e.study.clone(), path: p });
                }
            }
            let report = load_report(root, &e.report, table)?;
            let parsed: BTreeSet<String> = report.entity_set();
            let listed: BTreeSet<String> = e.organs.iter().cloned().collect();
            if parsed != listed {
                return Err(IoError::OrganMismatch {
                    study: e.study.clone(),
                    detail: format!("manifest {listed:?} vs report {parsed:?}"),
                });
            }
        }
        Ok(())
    }

    pub fn entry(&self, study: &str) -> Option<&ManifestEntry> {
        self.entries.iter().find(|e| e.study == study)
    }
}

pub fn load_report(
    root: &Path,
    rel: &str,
    table: &OrganEntityTable,
) -> Result<StructuredReport, IoError> {
    let path = root.join(rel);
    let text =
        std::fs::read_to_string(&path).map_err(|source| IoError::Read { path, source })?;
    parse_report(&text, table).map_err(IoError::from)
}

pub fn load_truth(root: &Path, rel: &str) -> Result<PhantomTruth, IoError> {
    let path = root.join(rel);
    let text =
        std::fs::read_to_string(&path).map_err(|source| IoError::Read { path: path.clone(), source })?;
    serde_json::from_str(&text).map_err(|source| IoError::Json { path, source })
}

pub fn save_truth(path: impl AsRef<Path>, truth: &PhantomTruth) -> Result<(), IoError> {
    let path = path.as_ref();
    let json = serde_json::to_string(truth)
        .map_err(|source| IoError::Json { path: path.into(), source })?;
    std::fs::write(path, json).map_err(|source| IoError::Write { path: path.into(), source })
}

pub fn load_series(root: &Path, entry: &ManifestEntry) -> Result<Vec<Volume>, IoError> {
    entry.volumes.iter().map(|rel| load_volume(root.join(rel))).collect()
}
