//! Native corpus format: one patient per line with embedded notes.
//!
//! ```text
//! {"patient_id": "P1", "labels": {"HBA1C": "MET"}, "notes": [{"note_id": "n1", "date": "2024-01-01", "text": "..."}]}
//! ```

use std::collections::BTreeMap;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use super::{parse_date, Corpus, CorpusError, Decision, Note, Patient, DATE_FORMAT};

#[derive(Deserialize)]
struct RawPatient {
    patient_id: Option<String>,
    #[serde(default)]
    labels: Option<BTreeMap<String, String>>,
    notes: Option<Vec<RawNote>>,
}

#[derive(Deserialize)]
struct RawNote {
    note_id: Option<String>,
    date: Option<serde_json::Value>,
    text: Option<String>,
}

#[derive(Serialize)]
struct OutPatient<'a> {
    patient_id: &'a str,
    #[serde(skip_serializing_if = "BTreeMap::is_empty")]
    labels: &'a BTreeMap<String, Decision>,
    notes: Vec<OutNote<'a>>,
}

#[derive(Serialize)]
struct OutNote<'a> {
    note_id: &'a str,
    date: String,
    text: &'a str,
}

pub fn read_jsonl<R: BufRead>(reader: R) -> Result<Corpus, CorpusError> {
    let mut patients = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(|e| CorpusError::MalformedRecord {
            location: format!("line {line_no}"),
            detail: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        patients.push(parse_line(&line, line_no)?);
    }
    Corpus::new(patients)
}

fn parse_line(line: &str, line_no: usize) -> Result<Patient, CorpusError> {
    let at = format!("line {line_no}");
    let raw: RawPatient = serde_json::from_str(line).map_err(|e| CorpusError::MalformedRecord {
        location: at.clone(),
        detail: e.to_string(),
    })?;
    let patient_id = raw.patient_id.ok_or_else(|| CorpusError::MalformedRecord {
        location: at.clone(),
        detail: "missing field \"patient_id\"".into(),
    })?;
    let raw_notes = raw.notes.ok_or_else(|| CorpusError::MalformedRecord {
        location: at.clone(),
        detail: "missing field \"notes\"".into(),
    })?;

    let mut notes = Vec::with_capacity(raw_notes.len());
    for (n, raw_note) in raw_notes.into_iter().enumerate() {
        let note_at = format!("{at}, patient {patient_id:?}, note #{}", n + 1);
        let note_id = raw_note.note_id.ok_or_else(|| CorpusError::MalformedRecord {
            location: note_at.clone(),
            detail: "missing field \"note_id\"".into(),
        })?;
        let note_at = format!("{at}, patient {patient_id:?}, note {note_id:?}");
        let date_str = match raw_note.date {
            Some(serde_json::Value::String(s)) => Some(s),
            Some(other) => Some(other.to_string()),
            None => None,
        };
        let date = date_str
            .as_deref()
            .and_then(parse_date)
            .ok_or_else(|| CorpusError::DateParse {
                location: note_at.clone(),
                value: date_str.clone(),
            })?;
        let text = raw_note.text.ok_or_else(|| CorpusError::MalformedRecord {
            location: note_at.clone(),
            detail: "missing field \"text\"".into(),
        })?;
        notes.push(Note {
            note_id,
            patient_id: patient_id.clone(),
            date,
            text,
        });
    }

    let mut labels = BTreeMap::new();
    for (criterion, value) in raw.labels.unwrap_or_default() {
        let decision = value.parse::<Decision>().map_err(|e| CorpusError::MalformedRecord {
            location: format!("{at}, patient {patient_id:?}, label {criterion:?}"),
            detail: e.to_string(),
        })?;
        labels.insert(criterion, decision);
    }
    Ok(Patient::new(patient_id, notes).with_labels(labels))
}

pub fn write_jsonl<W: Write>(corpus: &Corpus, mut writer: W) -> std::io::Result<()> {
    for patient in corpus.patients() {
        let out = OutPatient {
            patient_id: &patient.patient_id,
            labels: &patient.labels,
            notes: patient
                .notes
                .iter()
                .map(|n| OutNote {
                    note_id: &n.note_id,
                    date: n.date.format(DATE_FORMAT).to_string(),
                    text: &n.text,
                })
                .collect(),
        };
        serde_json::to_writer(&mut writer, &out)?;
        writer.write_all(b"\n")?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    const TWO_PATIENTS: &str = r#"{"patient_id":"A","notes":[{"note_id":"1","date":"2024-01-01","text":"first"},{"note_id":"2","date":"2023-06-01","text":"second"}]}
{"patient_id":"B","labels":{"HBA1C":"MET","ENGLISH":"NOT MET"},"notes":[{"note_id":"1","date":"2024-02-01","text":"x"},{"note_id":"2","date":"2024-03-01","text":"y"}]}
"#;

    #[test]
    fn reads_patients_and_notes() {
        let corpus = read_jsonl(TWO_PATIENTS.as_bytes()).unwrap();
        assert_eq!(corpus.len(), 2);
        assert_eq!(corpus.note_count(), 4);
        let a = corpus.patient("A").unwrap();
        assert_eq!(a.notes[0].note_id, "2", "notes sorted by date");
        let b = corpus.patient("B").unwrap();
        assert_eq!(b.labels["HBA1C"], Decision::Met);
        assert_eq!(b.labels["ENGLISH"], Decision::NotMet);
    }

    #[test]
    fn missing_date_names_the_record() {
        let line = r#"{"patient_id":"A","notes":[{"note_id":"n7","text":"t"}]}"#;
        let err = read_jsonl(line.as_bytes()).unwrap_err();
        assert_eq!(err.code(), "DATE_PARSE_ERROR");
        let msg = err.to_string();
        assert!(msg.contains("n7") && msg.contains("line 1"), "{msg}");
    }

    #[test]
    fn bad_date_and_missing_fields() {
        let bad = r#"{"patient_id":"A","notes":[{"note_id":"n","date":"yesterday","text":"t"}]}"#;
        assert_eq!(read_jsonl(bad.as_bytes()).unwrap_err().code(), "DATE_PARSE_ERROR");
        let no_text = r#"{"patient_id":"A","notes":[{"note_id":"n","date":"2024-01-01"}]}"#;
        assert_eq!(read_jsonl(no_text.as_bytes()).unwrap_err().code(), "MALFORMED_RECORD");
        let not_json = "{patient";
        assert_eq!(read_jsonl(not_json.as_bytes()).unwrap_err().code(), "MALFORMED_RECORD");
        let dup = format!("{}\n{}", TWO_PATIENTS.lines().next().unwrap(), TWO_PATIENTS.lines().next().unwrap());
        assert_eq!(read_jsonl(dup.as_bytes()).unwrap_err().code(), "DUPLICATE_ID");
    }

    #[test]
    fn round_trip_is_semantically_equal() {
        let corpus = read_jsonl(TWO_PATIENTS.as_bytes()).unwrap();
        let mut buf = Vec::new();
        write_jsonl(&corpus, &mut buf).unwrap();
        let again = read_jsonl(buf.as_slice()).unwrap();
        assert_eq!(corpus, again);
    }
}
