use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::CorpusError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    /// MET if any note is MET.
    Max,
    /// MET only if every note is MET.
    Min,
    /// Decision of the latest note inside a trailing month window.
    MostRecent,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CriterionSpec {
    pub criterion_id: String,
    pub definition: String,
    pub aggregation: Aggregation,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub window_months: Option<u32>,
}

impl CriterionSpec {
    pub fn new(criterion_id: impl Into<String>, definition: impl Into<String>, aggregation: Aggregation) -> Self {
        CriterionSpec {
            criterion_id: criterion_id.into(),
            definition: definition.into(),
            aggregation,
            window_months: None,
        }
    }

    pub fn most_recent(criterion_id: impl Into<String>, definition: impl Into<String>, window_months: u32) -> Self {
        CriterionSpec {
            criterion_id: criterion_id.into(),
            definition: definition.into(),
            aggregation: Aggregation::MostRecent,
            window_months: Some(window_months),
        }
    }

    pub fn validate(&self) -> Result<(), CorpusError> {
        let location = format!("criterion {:?}", self.criterion_id);
        let malformed = |detail: &str| CorpusError::MalformedRecord {
            location: location.clone(),
            detail: detail.to_string(),
        };
        if self.criterion_id.trim().is_empty() {
            return Err(malformed("empty criterion_id"));
        }
        if self.definition.trim().is_empty() {
            return Err(malformed("empty definition"));
        }
        match (self.aggregation, self.window_months) {
            (Aggregation::MostRecent, None) => Err(malformed("most_recent aggregation requires window_months")),
            (Aggregation::MostRecent, Some(0)) => Err(malformed("window_months must be positive")),
            (Aggregation::Max | Aggregation::Min, Some(_)) => {
                Err(malformed("window_months is only valid with most_recent aggregation"))
            }
            _ => Ok(()),
        }
    }
}

/// Reads a JSON array of criterion specs and validates each one.
pub fn load_criteria(path: impl AsRef<Path>) -> Result<Vec<CriterionSpec>, CorpusError> {
    let path = path.as_ref();
    let raw = std::fs::read_to_string(path).map_err(|source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let criteria: Vec<CriterionSpec> = serde_json::from_str(&raw).map_err(|e| CorpusError::MalformedRecord {
        location: path.display().to_string(),
        detail: e.to_string(),
    })?;
    validate_criteria(&criteria)?;
    Ok(criteria)
}

pub(crate) fn validate_criteria(criteria: &[CriterionSpec]) -> Result<(), CorpusError> {
    let mut seen = std::collections::BTreeSet::new();
    for c in criteria {
        c.validate()?;
        if !seen.insert(c.criterion_id.as_str()) {
            return Err(CorpusError::DuplicateId {
                location: "criteria".into(),
                id: c.criterion_id.clone(),
            });
        }
    }
    Ok(())
}

const CANONICAL_JSON: &str = include_str!("../../data/n2c2_criteria.json");

/// The 13 n2c2 2018 inclusion criteria with refined definitions and their
/// per-criterion aggregation policy.
pub fn canonical_criteria() -> Vec<CriterionSpec> {
    serde_json::from_str(CANONICAL_JSON).expect("bundled criteria file is valid")
}

/// Fraction of test-split patients meeting each canonical criterion.
pub fn canonical_prevalence() -> BTreeMap<String, f64> {
    [
        ("ABDOMINAL", 0.35),
        ("ADVANCED-CAD", 0.52),
        ("ALCOHOL-ABUSE", 0.03),
        ("ASP-FOR-MI", 0.79),
        ("CREATININE", 0.28),
        ("DIETSUPP-2MOS", 0.51),
        ("DRUG-ABUSE", 0.03),
        ("ENGLISH", 0.85),
        ("HBA1C", 0.41),
        ("KETO-1YR", 0.00),
        ("MAJOR-DIABETES", 0.50),
        ("MAKES-DECISIONS", 0.97),
        ("MI-6MOS", 0.09),
    ]
    .into_iter()
    .map(|(k, v)| (k.to_string(), v))
    .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn canonical_policy_table() {
        let criteria = canonical_criteria();
        assert_eq!(criteria.len(), 13);
        validate_criteria(&criteria).unwrap();
        let count = |a| criteria.iter().filter(|c| c.aggregation == a).count();
        assert_eq!(count(Aggregation::Max), 9);
        assert_eq!(count(Aggregation::Min), 1);
        assert_eq!(count(Aggregation::MostRecent), 3);
        let window = |id: &str| criteria.iter().find(|c| c.criterion_id == id).unwrap().window_months;
        assert_eq!(window("DIETSUPP-2MOS"), Some(2));
        assert_eq!(window("KETO-1YR"), Some(12));
        assert_eq!(window("MI-6MOS"), Some(6));
        let english = criteria.iter().find(|c| c.criterion_id == "ENGLISH").unwrap();
        assert_eq!(english.aggregation, Aggregation::Min);
        let prevalence = canonical_prevalence();
        assert!(criteria.iter().all(|c| prevalence.contains_key(&c.criterion_id)));
    }

    #[test]
    fn window_required_exactly_for_most_recent() {
        let mut c = CriterionSpec::new("X", "def", Aggregation::MostRecent);
        assert!(c.validate().is_err());
        c.window_months = Some(3);
        c.validate().unwrap();
        c.aggregation = Aggregation::Max;
        assert!(c.validate().is_err());
        let empty = CriterionSpec::new("X", " ", Aggregation::Max);
        assert!(empty.validate().is_err());
    }
}
