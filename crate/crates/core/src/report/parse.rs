//! Parser and serializer for the canonical report format.

use super::entity::OrganEntityTable;
use super::{OrganSection, ReportError, StructuredReport};

enum Block {
    None,
    Section { name: String, line: usize, details: Vec<String> },
    Conclusion { line: usize, details: Vec<String> },
}

/// Parse canonical report text. Entities are resolved against `table`;
/// unknown organ names parse with `entity = None` (callers decide policy).
pub fn parse_report(text: &str, table: &OrganEntityTable) -> Result<StructuredReport, ReportError> {
    let mut study_id: Option<String> = None;
    let mut sections: Vec<OrganSection> = Vec::new();
    let mut conclusion: Option<String> = None;
    let mut block = Block::None;

    let close = |block: &mut Block,
                     sections: &mut Vec<OrganSection>,
                     conclusion: &mut Option<String>|
     -> Result<(), ReportError> {
        match std::mem::replace(block, Block::None) {
            Block::None => Ok(()),
            Block::Section { name, line, details } => {
                if details.is_empty() {
                    return Err(ReportError::EmptySection { line, name });
                }
                sections.push(OrganSection {
                    entity: table.map_organ(&name).map(str::to_string),
                    name,
                    details: details.join("\n"),
                });
                Ok(())
            }
            Block::Conclusion { line, details } => {
                if details.is_empty() {
                    return Err(ReportError::EmptyConclusion { line });
                }
                *conclusion = Some(details.join("\n"));
                Ok(())
            }
        }
    };

    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let indented = raw.starts_with(' ') || raw.starts_with('\t');
        if indented {
            let detail = raw.trim().to_string();
            match &mut block {
                Block::None => {
                    if conclusion.is_some() {
                        return Err(ReportError::TrailingContent { line });
                    }
                    return Err(ReportError::DetailOutsideSection { line });
                }
                Block::Section { details, .. } | Block::Conclusion { details, .. } => {
                    details.push(detail)
                }
            }
            continue;
        }
        if conclusion.is_some() || matches!(block, Block::Conclusion { .. }) {
            return Err(ReportError::TrailingContent { line });
        }
        if let Some(rest) = raw.strip_prefix("STUDY:") {
            if study_id.is_some() {
                return Err(ReportError::Duplicate { line, what: "STUDY".into() });
            }
            study_id = Some(rest.trim().to_string());
        } else if let Some(rest) = raw.strip_prefix("ORGAN:") {
            close(&mut block, &mut sections, &mut conclusion)?;
            let name = rest.trim().to_string();
            if name.is_empty() {
                return Err(ReportError::EmptyOrganName { line });
            }
            block = Block::Section { name, line, details: Vec::new() };
        } else if raw.trim_end() == "CONCLUSION:" {
            close(&mut block, &mut sections, &mut conclusion)?;
            block = Block::Conclusion { line, details: Vec::new() };
        } else {
            return Err(ReportError::UnknownKeyword { line, text: raw.trim_end().to_string() });
        }
    }
    close(&mut block, &mut sections, &mut conclusion)?;

    let study_id = study_id.ok_or(ReportError::MissingStudy)?;
    if sections.is_empty() {
        return Err(ReportError::NoSections);
    }
    let conclusion = conclusion.ok_or(ReportError::MissingConclusion)?;
    Ok(StructuredReport { study_id, sections, conclusion })
}

/// Canonical serialization: two-space indentation, trailing newline.
pub fn serialize_report(report: &StructuredReport) -> String {
    let mut out = String::new();
    out.push_str(&format!("STUDY: {}\n", report.study_id));
    for s in &report.sections {
        out.push_str(&format!("ORGAN: {}\n", s.name));
        for line in s.details.lines() {
            out.push_str(&format!("  {line}\n"));
        }
    }
    out.push_str("CONCLUSION:\n");
    for line in report.conclusion.lines() {
        out.push_str(&format!("  {line}\n"));
    }
    out
}
