//! Structured radiology-style reports: the canonical text format, the
//! organ-entity lookup table, and the synthetic report generator paired
//! with phantoms.
//!
//! Canonical report grammar (UTF-8, one construct per line):
//!
//! ```text
//! report     = study-line organ-section+ conclusion
//! study-line = "STUDY:" SP id NL
//! organ-section = "ORGAN:" SP name NL detail-line+
//! conclusion = "CONCLUSION:" NL detail-line+
//! detail-line = INDENT text NL        ; INDENT = one or more spaces/tabs
//! ```
//!
//! Serialization uses exactly two spaces of indentation; parsing accepts
//! any indentation. `serialize(parse(text))` is the canonical normal form.

pub mod entity;
pub mod generate;
pub mod parse;

use std::collections::BTreeSet;
use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ReportError {
    #[error("line {line}: expected a keyword line (STUDY:/ORGAN:/CONCLUSION:), got '{text}'")]
    UnknownKeyword { line: usize, text: String },
    #[error("line {line}: detail text before any section header")]
    DetailOutsideSection { line: usize },
    #[error("line {line}: organ name is empty")]
    EmptyOrganName { line: usize },
    #[error("line {line}: section '{name}' has no detail lines")]
    EmptySection { line: usize, name: String },
    #[error("missing STUDY: header line")]
    MissingStudy,
    #[error("line {line}: duplicate {what} block")]
    Duplicate { line: usize, what: String },
    #[error("report has no organ sections")]
    NoSections,
    #[error("missing CONCLUSION: block")]
    MissingConclusion,
    #[error("line {line}: CONCLUSION block is empty")]
    EmptyConclusion { line: usize },
    #[error("line {line}: content after the CONCLUSION block")]
    TrailingContent { line: usize },
    #[error("entity table line {line}: {reason}")]
    BadEntityTable { line: usize, reason: String },
}

/// One organ section: surface name as written, the canonical entity it maps
/// to (if the table knows it), and the free-text details.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OrganSection {
    pub name: String,
    pub entity: Option<String>,
    pub details: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StructuredReport {
    pub study_id: String,
    pub sections: Vec<OrganSection>,
    pub conclusion: String,
}

impl StructuredReport {
    /// Canonical entities mentioned by the report's sections.
    pub fn entity_set(&self) -> BTreeSet<String> {
        self.sections.iter().filter_map(|s| s.entity.clone()).collect()
    }

    /// Details for the sampled entity; sections are concatenated in
    /// document order. Falls back to all details when the entity is absent.
    pub fn select_text_input(&self, entity: &str) -> String {
        let matched: Vec<&str> = self
            .sections
            .iter()
            .filter(|s| s.entity.as_deref() == Some(entity))
            .map(|s| s.details.as_str())
            .collect();
        if matched.is_empty() {
            self.sections.iter().map(|s| s.details.as_str()).collect::<Vec<_>>().join("\n")
        } else {
            matched.join("\n")
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn report() -> StructuredReport {
        StructuredReport {
            study_id: "s1".into(),
            sections: vec![
                OrganSection { name: "left kidney".into(), entity: Some("KIDNEY".into()), details: "kidney text".into() },
                OrganSection { name: "liver".into(), entity: Some("LIVER".into()), details: "liver text".into() },
                OrganSection { name: "right kidney".into(), entity: Some("KIDNEY".into()), details: "more kidney".into() },
            ],
            conclusion: "fine".into(),
        }
    }

    #[test]
    fn select_text_matches_entity() {
        let r = report();
        assert_eq!(r.select_text_input("LIVER"), "liver text");
    }

    #[test]
    fn select_text_concatenates_bilateral_sections_in_order() {
        let r = report();
        assert_eq!(r.select_text_input("KIDNEY"), "kidney text\nmore kidney");
    }

    #[test]
    fn select_text_falls_back_to_everything() {
        let r = report();
        assert_eq!(r.select_text_input("BRAIN"), "kidney text\nliver text\nmore kidney");
    }

    #[test]
    fn entity_set_deduplicates() {
        let names: Vec<String> = report().entity_set().into_iter().collect();
        assert_eq!(names, vec!["KIDNEY".to_string(), "LIVER".to_string()]);
    }
}
