//! Templated synthetic reports paired with phantom ground truth.

use super::entity::OrganEntityTable;
use super::parse::serialize_report;
use super::{OrganSection, StructuredReport};
use crate::rng::stream_rng;
use crate::volume::phantom::PhantomTruth;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Conclusion line used when no pathology exists anywhere in the study.
pub const UNREMARKABLE: &str = "No significant abnormality detected.";

fn pick<'a>(rng: &mut ChaCha8Rng, pool: &[&'a str]) -> &'a str {
    pool[rng.gen_range(0..pool.len())]
}

fn third(center: f64, extent: usize, terms: [&str; 3]) -> &str {
    let f = center / extent as f64;
    if f < 1.0 / 3.0 {
        terms[0]
    } else if f < 2.0 / 3.0 {
        terms[1]
    } else {
        terms[2]
    }
}

fn position_term(truth: &PhantomTruth, organ: usize) -> String {
    let b = &truth.boxes[organ];
    let center = |a: usize| (b.lo[a] + b.hi[a]) as f64 / 2.0;
    let x = third(center(0), truth.extents[0], ["left", "central", "right"]);
    let y = third(center(1), truth.extents[1], ["anterior", "middle", "posterior"]);
    let z = third(center(2), truth.extents[2], ["inferior", "mid", "superior"]);
    format!("{x} {y} {z}")
}

/// Render the canonical report text for one phantom. Deterministic in
/// `seed`; entity content is seed-independent, surface phrasing is not.
pub fn generate_synthetic_report(
    study_id: &str,
    truth: &PhantomTruth,
    table: &OrganEntityTable,
    seed: u64,
) -> String {
    let mut rng = stream_rng(seed, "report-text", &[]);
    let mut sections = Vec::new();
    let mut organ_names = Vec::new();
    for (i, entity) in truth.organ_entities.iter().enumerate() {
        let synonyms = table.synonyms_of(entity);
        let name = if synonyms.is_empty() {
            entity.to_lowercase()
        } else {
            synonyms[rng.gen_range(0..synonyms.len())].to_string()
        };
        organ_names.push(name.clone());

        let ext = truth.boxes[i].extents();
        let pos = position_term(truth, i);
        let size_sentence = match rng.gen_range(0..3) {
            0 => format!(
                "The {name} measures about {} by {} by {} voxels in the {pos} portion of the field.",
                ext[0], ext[1], ext[2]
            ),
            1 => format!("Measured extent is {}x{}x{} voxels, located {pos}.", ext[0], ext[1], ext[2]),
            _ => format!("It occupies a {}x{}x{} voxel region toward the {pos} aspect.", ext[0], ext[1], ext[2]),
        };
        let signal_sentence = pick(
            &mut rng,
            &[
                "Signal texture is typical for this organ.",
                "Parenchymal signal appears within expected limits.",
                "No diffuse signal alteration is present.",
            ],
        )
        .to_string();

        let mut lines = vec![size_sentence, signal_sentence];
        let mut has_pathology = false;
        for p in truth.pathologies.iter().filter(|p| &p.organ_entity == entity) {
            has_pathology = true;
            let label = p.label.to_lowercase();
            lines.push(match rng.gen_range(0..3) {
                0 => format!("There is a {label} within the {name}."),
                1 => format!("A focal {label} is identified in the {name}."),
                _ => format!("Findings include a {label} involving the {name}."),
            });
        }
        if !has_pathology {
            lines.push(
                pick(
                    &mut rng,
                    &[
                        "No focal lesion is seen.",
                        "No discrete abnormality is identified.",
                        "Unremarkable appearance otherwise.",
                    ],
                )
                .to_string(),
            );
        }
        sections.push(OrganSection { name, entity: Some(entity.clone()), details: lines.join("\n") });
    }

    let mut conclusion_lines = vec![match rng.gen_range(0..2) {
        0 => format!("Patient age {} years.", truth.age.round() as i64),
        _ => format!("Study of a {}-year-old patient.", truth.age.round() as i64),
    }];
    if truth.pathologies.is_empty() {
        conclusion_lines.push(UNREMARKABLE.to_string());
    } else {
        for p in &truth.pathologies {
            let organ_idx = truth.organ_entities.iter().position(|e| e == &p.organ_entity);
            let name = organ_idx.map(|i| organ_names[i].as_str()).unwrap_or("study");
            conclusion_lines.push(format!("{} in the {name}.", p.label.to_uppercase()));
        }
    }

    serialize_report(&StructuredReport {
        study_id: study_id.to_string(),
        sections,
        conclusion: conclusion_lines.join("\n"),
    })
}
