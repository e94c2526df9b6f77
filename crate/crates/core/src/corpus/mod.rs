//! Patients, dated notes, criteria and labels.
//!
//! A [`Corpus`] is immutable once loaded. Notes inside a patient are kept in
//! ascending `(date, note_id)` order, which every downstream stage relies on
//! for chronological prompt injection and recency-based aggregation.

mod criteria;
mod jsonl;
mod n2c2;
mod synthetic;

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use chrono::NaiveDate;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

pub use criteria::{canonical_criteria, canonical_prevalence, load_criteria, Aggregation, CriterionSpec};
pub use jsonl::{read_jsonl, write_jsonl};
pub use n2c2::{parse_n2c2_document, read_n2c2};
pub use synthetic::{
    generate_synthetic_corpus, met_sentinel, not_met_sentinel, FactPlacement, SyntheticConfig, SENTINEL_PREFIX,
};

pub const DATE_FORMAT: &str = "%Y-%m-%d";

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("failed to read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed record at {location}: {detail}")]
    MalformedRecord { location: String, detail: String },
    #[error("unparseable date at {location}: {}", value.as_deref().unwrap_or("<missing>"))]
    DateParse {
        location: String,
        value: Option<String>,
    },
    #[error("duplicate id {id:?} at {location}")]
    DuplicateId { location: String, id: String },
    #[error("invalid config: {0}")]
    InvalidConfig(String),
}

impl CorpusError {
    /// Stable machine-readable error code.
    pub fn code(&self) -> &'static str {
        match self {
            CorpusError::Io { .. } => "IO_ERROR",
            CorpusError::MalformedRecord { .. } => "MALFORMED_RECORD",
            CorpusError::DateParse { .. } => "DATE_PARSE_ERROR",
            CorpusError::DuplicateId { .. } => "DUPLICATE_ID",
            CorpusError::InvalidConfig(_) => "INVALID_CONFIG",
        }
    }
}

/// Binary eligibility outcome for one (patient, criterion) pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Decision {
    Met,
    NotMet,
}

impl Decision {
    pub fn as_str(self) -> &'static str {
        match self {
            Decision::Met => "MET",
            Decision::NotMet => "NOT MET",
        }
    }

    pub fn is_met(self) -> bool {
        self == Decision::Met
    }

    pub fn from_bool(met: bool) -> Self {
        if met {
            Decision::Met
        } else {
            Decision::NotMet
        }
    }
}

impl fmt::Display for Decision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("unknown decision value {0:?}")]
pub struct UnknownDecision(pub String);

impl FromStr for Decision {
    type Err = UnknownDecision;

    /// Case-insensitive; `NOT MET`, `NOT_MET` and `NOT-MET` are all accepted.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let norm: String = s
            .trim()
            .chars()
            .map(|c| if c == '_' || c == '-' { ' ' } else { c.to_ascii_uppercase() })
            .collect();
        let norm = norm.split_whitespace().collect::<Vec<_>>().join(" ");
        match norm.as_str() {
            "MET" => Ok(Decision::Met),
            "NOT MET" | "NOTMET" => Ok(Decision::NotMet),
            _ => Err(UnknownDecision(s.to_string())),
        }
    }
}

impl Serialize for Decision {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(self.as_str())
    }
}

impl<'de> Deserialize<'de> for Decision {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Note {
    pub note_id: String,
    pub patient_id: String,
    pub date: NaiveDate,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Patient {
    pub patient_id: String,
    pub notes: Vec<Note>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub labels: BTreeMap<String, Decision>,
}

impl Patient {
    /// Builds a patient, sorting notes by `(date, note_id)`.
    pub fn new(patient_id: impl Into<String>, mut notes: Vec<Note>) -> Self {
        notes.sort_by(|a, b| a.date.cmp(&b.date).then_with(|| a.note_id.cmp(&b.note_id)));
        Patient {
            patient_id: patient_id.into(),
            notes,
            labels: BTreeMap::new(),
        }
    }

    pub fn with_labels(mut self, labels: BTreeMap<String, Decision>) -> Self {
        self.labels = labels;
        self
    }

    pub fn note(&self, note_id: &str) -> Option<&Note> {
        self.notes.iter().find(|n| n.note_id == note_id)
    }

    /// Date of the most recent note. Panics on a patient without notes,
    /// which a validated corpus never contains.
    pub fn reference_date(&self) -> NaiveDate {
        reference_date(self)
    }
}

/// The date of the patient's last note; used as "today" in prompts and as the
/// anchor for time-windowed aggregation.
pub fn reference_date(patient: &Patient) -> NaiveDate {
    patient
        .notes
        .iter()
        .map(|n| n.date)
        .max()
        .expect("patient has at least one note")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CorpusFormat {
    Jsonl,
    N2c2Xml,
}

impl FromStr for CorpusFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().replace('_', "-").as_str() {
            "jsonl" => Ok(CorpusFormat::Jsonl),
            "n2c2" | "n2c2-xml" | "xml" => Ok(CorpusFormat::N2c2Xml),
            other => Err(format!("unknown corpus format {other:?} (expected jsonl or n2c2-xml)")),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Corpus {
    patients: Vec<Patient>,
    by_id: BTreeMap<String, usize>,
}

impl Corpus {
    /// Validates every invariant and builds the lookup index.
    pub fn new(patients: Vec<Patient>) -> Result<Self, CorpusError> {
        let mut by_id = BTreeMap::new();
        for (idx, patient) in patients.iter().enumerate() {
            let location = format!("patient {:?}", patient.patient_id);
            if patient.patient_id.trim().is_empty() {
                return Err(CorpusError::MalformedRecord {
                    location: format!("patient #{}", idx + 1),
                    detail: "empty patient_id".into(),
                });
            }
            if by_id.insert(patient.patient_id.clone(), idx).is_some() {
                return Err(CorpusError::DuplicateId {
                    location,
                    id: patient.patient_id.clone(),
                });
            }
            if patient.notes.is_empty() {
                return Err(CorpusError::MalformedRecord {
                    location,
                    detail: "patient has no notes".into(),
                });
            }
            let mut seen = std::collections::BTreeSet::new();
            for note in &patient.notes {
                let note_loc = format!("patient {:?}, note {:?}", patient.patient_id, note.note_id);
                if note.note_id.trim().is_empty() {
                    return Err(CorpusError::MalformedRecord {
                        location: note_loc,
                        detail: "empty note_id".into(),
                    });
                }
                if note.patient_id != patient.patient_id {
                    return Err(CorpusError::MalformedRecord {
                        location: note_loc,
                        detail: format!("note belongs to patient {:?}", note.patient_id),
                    });
                }
                if note.text.trim().is_empty() {
                    return Err(CorpusError::MalformedRecord {
                        location: note_loc,
                        detail: "empty note text".into(),
                    });
                }
                if !seen.insert(note.note_id.as_str()) {
                    return Err(CorpusError::DuplicateId {
                        location: note_loc,
                        id: note.note_id.clone(),
                    });
                }
            }
            let sorted = patient
                .notes
                .windows(2)
                .all(|w| (w[0].date, &w[0].note_id) <= (w[1].date, &w[1].note_id));
            if !sorted {
                return Err(CorpusError::MalformedRecord {
                    location,
                    detail: "notes are not in chronological order".into(),
                });
            }
        }
        Ok(Corpus { patients, by_id })
    }

    pub fn patients(&self) -> &[Patient] {
        &self.patients
    }

    pub fn patient(&self, patient_id: &str) -> Option<&Patient> {
        self.by_id.get(patient_id).map(|&i| &self.patients[i])
    }

    pub fn len(&self) -> usize {
        self.patients.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patients.is_empty()
    }

    pub fn note_count(&self) -> usize {
        self.patients.iter().map(|p| p.notes.len()).sum()
    }

    pub fn has_labels(&self) -> bool {
        self.patients.iter().any(|p| !p.labels.is_empty())
    }
}

/// Loads a corpus in the declared format. `N2c2Xml` accepts a single file or
/// a directory of `*.xml` files (one patient per file, id = file stem).
pub fn load_corpus(path: impl AsRef<Path>, format: CorpusFormat) -> Result<Corpus, CorpusError> {
    let path = path.as_ref();
    match format {
        CorpusFormat::Jsonl => {
            let file = std::fs::File::open(path).map_err(|source| CorpusError::Io {
                path: path.to_path_buf(),
                source,
            })?;
            read_jsonl(std::io::BufReader::new(file))
        }
        CorpusFormat::N2c2Xml => read_n2c2(path),
    }
}

pub fn write_corpus(corpus: &Corpus, path: impl AsRef<Path>) -> Result<(), CorpusError> {
    let path = path.as_ref();
    let io_err = |source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    };
    let file = std::fs::File::create(path).map_err(io_err)?;
    let mut writer = std::io::BufWriter::new(file);
    write_jsonl(corpus, &mut writer).map_err(io_err)?;
    use std::io::Write;
    writer.flush().map_err(io_err)
}

/// Reference labels keyed by `(patient_id, criterion_id)`.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroundTruth {
    labels: BTreeMap<(String, String), Decision>,
}

impl GroundTruth {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, patient_id: impl Into<String>, criterion_id: impl Into<String>, decision: Decision) {
        self.labels.insert((patient_id.into(), criterion_id.into()), decision);
    }

    pub fn get(&self, patient_id: &str, criterion_id: &str) -> Option<Decision> {
        self.labels
            .get(&(patient_id.to_string(), criterion_id.to_string()))
            .copied()
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &str, Decision)> {
        self.labels.iter().map(|((p, c), d)| (p.as_str(), c.as_str(), *d))
    }

    /// Collects the labels embedded in a corpus.
    pub fn from_corpus(corpus: &Corpus) -> Self {
        let mut gt = GroundTruth::new();
        for patient in corpus.patients() {
            for (criterion, decision) in &patient.labels {
                gt.insert(patient.patient_id.clone(), criterion.clone(), *decision);
            }
        }
        gt
    }

    pub fn labels_for(&self, patient_id: &str) -> BTreeMap<String, Decision> {
        self.labels
            .iter()
            .filter(|((p, _), _)| p == patient_id)
            .map(|((_, c), d)| (c.clone(), *d))
            .collect()
    }
}

pub(crate) fn parse_date(value: &str) -> Option<NaiveDate> {
    let v = value.trim();
    NaiveDate::parse_from_str(v, DATE_FORMAT)
        .or_else(|_| NaiveDate::parse_from_str(v, "%m/%d/%Y"))
        .or_else(|_| NaiveDate::parse_from_str(v, "%m/%d/%y"))
        .ok()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn note(id: &str, date: &str) -> Note {
        Note {
            note_id: id.into(),
            patient_id: "p".into(),
            date: parse_date(date).unwrap(),
            text: "text".into(),
        }
    }

    #[test]
    fn reference_date_is_latest_note() {
        let p = Patient::new("p", vec![note("a", "2024-03-15"), note("b", "2024-01-01")]);
        assert_eq!(reference_date(&p), parse_date("2024-03-15").unwrap());
        assert_eq!(p.notes[0].note_id, "b");

        let single = Patient::new("p", vec![note("a", "2023-07-04")]);
        assert_eq!(single.reference_date(), parse_date("2023-07-04").unwrap());

        let tied = Patient::new("p", vec![note("b", "2024-02-02"), note("a", "2024-02-02")]);
        assert_eq!(tied.reference_date(), parse_date("2024-02-02").unwrap());
        assert_eq!(tied.notes[0].note_id, "a");
    }

    #[test]
    fn decision_parsing_is_lenient_on_case_and_separator() {
        for s in ["MET", "met", " Met "] {
            assert_eq!(s.parse::<Decision>().unwrap(), Decision::Met);
        }
        for s in ["NOT MET", "not met", "Not_Met", "not-met", "NOT  MET"] {
            assert_eq!(s.parse::<Decision>().unwrap(), Decision::NotMet);
        }
        assert!("MAYBE".parse::<Decision>().is_err());
    }

    #[test]
    fn corpus_rejects_duplicate_patients_and_empty_text() {
        let p = Patient::new("p", vec![note("a", "2024-01-01")]);
        let err = Corpus::new(vec![p.clone(), p.clone()]).unwrap_err();
        assert_eq!(err.code(), "DUPLICATE_ID");

        let mut empty = p.clone();
        empty.notes[0].text = "   ".into();
        assert_eq!(Corpus::new(vec![empty]).unwrap_err().code(), "MALFORMED_RECORD");

        let no_notes = Patient::new("q", vec![]);
        assert_eq!(Corpus::new(vec![no_notes]).unwrap_err().code(), "MALFORMED_RECORD");
    }

    #[test]
    fn corpus_rejects_duplicate_note_ids() {
        let p = Patient::new("p", vec![note("a", "2024-01-01"), note("a", "2024-02-01")]);
        assert_eq!(Corpus::new(vec![p]).unwrap_err().code(), "DUPLICATE_ID");
    }
}
