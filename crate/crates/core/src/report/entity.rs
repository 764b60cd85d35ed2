//! Case-insensitive organ-name to canonical-entity lookup.

use super::ReportError;
use std::collections::BTreeMap;

/// Synonym table mapping surface forms to canonical anatomical entities.
/// Lookup folds case and surrounding whitespace.
#[derive(Debug, Clone)]
pub struct OrganEntityTable {
    by_synonym: BTreeMap<String, String>,
    entities: Vec<String>,
}

const BUILTIN: &[(&str, &[&str])] = &[
    ("ADRENAL", &["adrenal", "adrenal gland", "adrenal glands", "suprarenal gland"]),
    ("AORTA", &["aorta", "aortic arch", "abdominal aorta", "thoracic aorta"]),
    ("BLADDER", &["bladder", "urinary bladder", "vesica urinaria"]),
    ("BRAIN", &["brain", "cerebrum", "encephalon", "intracranial structures"]),
    ("BREAST", &["breast", "breasts", "mammary gland", "mammary tissue"]),
    ("COLON", &["colon", "large bowel", "large intestine", "sigmoid colon"]),
    ("GALLBLADDER", &["gallbladder", "gall bladder", "cholecyst"]),
    ("HEART", &["heart", "cardiac chambers", "myocardium", "cardiac silhouette"]),
    ("KIDNEY", &["kidney", "kidneys", "left kidney", "right kidney", "renal parenchyma"]),
    ("LIVER", &["liver", "hepatic parenchyma", "liver parenchyma", "hepar"]),
    ("LUNG", &["lung", "lungs", "left lung", "right lung", "pulmonary parenchyma"]),
    ("OVARY", &["ovary", "ovaries", "left ovary", "right ovary"]),
    ("PANCREAS", &["pancreas", "pancreatic gland", "pancreatic parenchyma"]),
    ("PROSTATE", &["prostate", "prostate gland", "prostatic gland"]),
    ("RECTUM", &["rectum", "rectal wall", "anorectum"]),
    ("SPINE", &["spine", "spinal column", "vertebral column", "vertebrae"]),
    ("SPLEEN", &["spleen", "splenic parenchyma", "lien"]),
    ("STOMACH", &["stomach", "gastric wall", "gastric body"]),
    ("THYROID", &["thyroid", "thyroid gland", "thyroid lobes"]),
    ("UTERUS", &["uterus", "uterine body", "womb"]),
];

fn fold(s: &str) -> String {
    s.trim().to_lowercase()
}

impl OrganEntityTable {
    pub fn builtin() -> OrganEntityTable {
        let lines: Vec<String> = BUILTIN
            .iter()
            .map(|(entity, syns)| format!("{entity}: {}", syns.join(", ")))
            .collect();
        OrganEntityTable::from_lines(lines.iter().map(|s| s.as_str())).expect("builtin table is valid")
    }

    /// Parse `ENTITY: syn1, syn2, ...` lines. Blank lines and `#` comments
    /// are skipped. A synonym claimed by two entities is an error.
    pub fn from_lines<'a>(lines: impl Iterator<Item = &'a str>) -> Result<OrganEntityTable, ReportError> {
        let mut by_synonym = BTreeMap::new();
        let mut entities = Vec::new();
        for (idx, raw) in lines.enumerate() {
            let line = idx + 1;
            let text = raw.trim();
            if text.is_empty() || text.starts_with('#') {
                continue;
            }
            let (entity, rest) = text.split_once(':').ok_or_else(|| ReportError::BadEntityTable {
                line,
                reason: "expected 'ENTITY: synonyms...'".into(),
            })?;
            let entity = entity.trim().to_uppercase();
            if entity.is_empty() {
                return Err(ReportError::BadEntityTable { line, reason: "empty entity name".into() });
            }
            if !entities.contains(&entity) {
                entities.push(entity.clone());
            }
            for syn in rest.split(',') {
                let key = fold(syn);
                if key.is_empty() {
                    return Err(ReportError::BadEntityTable { line, reason: "empty synonym".into() });
                }
                if let Some(prev) = by_synonym.insert(key.clone(), entity.clone()) {
                    if prev != entity {
                        return Err(ReportError::BadEntityTable {
                            line,
                            reason: format!("synonym '{key}' maps to both {prev} and {entity}"),
                        });
                    }
                }
            }
        }
        Ok(OrganEntityTable { by_synonym, entities })
    }

    /// Case-insensitive synonym lookup; `None` means unmapped.
    pub fn map_organ(&self, name: &str) -> Option<&str> {
        self.by_synonym.get(&fold(name)).map(|s| s.as_str())
    }

    pub fn entities(&self) -> &[String] {
        &self.entities
    }

    /// All synonyms of one entity, in sorted order.
    pub fn synonyms_of(&self, entity: &str) -> Vec<&str> {
        self.by_synonym
            .iter()
            .filter(|(_, e)| e.as_str() == entity)
            .map(|(s, _)| s.as_str())
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builtin_covers_twenty_entities_with_three_synonyms() {
        let t = OrganEntityTable::builtin();
        assert_eq!(t.entities().len(), 20);
        for e in t.entities() {
            assert!(t.synonyms_of(e).len() >= 3, "{e} has too few synonyms");
        }
    }

    #[test]
    fn case_and_synonym_folding() {
        let t = OrganEntityTable::builtin();
        assert_eq!(t.map_organ("Left Kidney"), Some("KIDNEY"));
        assert_eq!(t.map_organ("prostate gland"), Some("PROSTATE"));
        assert_eq!(t.map_organ("PROSTATE"), Some("PROSTATE"));
        assert_eq!(t.map_organ("  liver  "), Some("LIVER"));
        assert_eq!(t.map_organ("flux capacitor"), None);
    }

    #[test]
    fn conflicting_synonym_rejected() {
        let lines = ["A: shared", "B: shared"];
        let err = OrganEntityTable::from_lines(lines.iter().copied()).unwrap_err();
        assert!(matches!(err, ReportError::BadEntityTable { line: 2, .. }));
    }

    #[test]
    fn comments_and_blanks_skipped() {
        let lines = ["# comment", "", "HEART: heart, cardiac"];
        let t = OrganEntityTable::from_lines(lines.iter().copied()).unwrap();
        assert_eq!(t.map_organ("cardiac"), Some("HEART"));
    }
}
