//! Adapter for n2c2 2018 cohort-selection style XML files.
//!
//! Assumed layout (dataset convention, to be re-checked against licensed
//! copies of the data):
//!
//! ```text
//! <PatientMatching>
//!   <TEXT><![CDATA[
//! Record date: 2069-04-07
//! ...
//! ****************************************************************
//! Record date: 2069-12-10
//! ...
//!   ]]></TEXT>
//!   <TAGS>
//!     <ABDOMINAL met="not met" />
//!     <ENGLISH met="met" />
//!   </TAGS>
//! </PatientMatching>
//! ```
//!
//! Each record between separator lines becomes one note. The `Record date:`
//! line stays in the note text and is also parsed into the note date.

use std::collections::BTreeMap;
use std::path::Path;

use quick_xml::events::Event;
use quick_xml::Reader;

use super::{parse_date, Corpus, CorpusError, Decision, Note, Patient};

pub fn read_n2c2(path: &Path) -> Result<Corpus, CorpusError> {
    let io_err = |source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut files = Vec::new();
    if path.is_dir() {
        for entry in std::fs::read_dir(path).map_err(io_err)? {
            let p = entry.map_err(io_err)?.path();
            if p.extension().is_some_and(|e| e.eq_ignore_ascii_case("xml")) {
                files.push(p);
            }
        }
        files.sort();
    } else {
        files.push(path.to_path_buf());
    }

    let mut patients = Vec::with_capacity(files.len());
    for file in files {
        let xml = std::fs::read_to_string(&file).map_err(|source| CorpusError::Io {
            path: file.clone(),
            source,
        })?;
        let patient_id = file
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        patients.push(parse_n2c2_document(&patient_id, &xml)?);
    }
    Corpus::new(patients)
}

/// Parses one patient document.
pub fn parse_n2c2_document(patient_id: &str, xml: &str) -> Result<Patient, CorpusError> {
    let location = format!("patient {patient_id:?}");
    let malformed = |detail: String| CorpusError::MalformedRecord {
        location: location.clone(),
        detail,
    };

    let mut reader = Reader::from_str(xml);
    let mut text: Option<String> = None;
    let mut labels = BTreeMap::new();
    let mut in_text = false;
    let mut in_tags = false;

    loop {
        let event = reader
            .read_event()
            .map_err(|e| malformed(format!("xml error at byte {}: {e}", reader.buffer_position())))?;
        match event {
            Event::Start(e) => match e.name().as_ref() {
                b"TEXT" => {
                    in_text = true;
                    text.get_or_insert_with(String::new);
                }
                b"TAGS" => in_tags = true,
                _ if in_tags => collect_tag(&e, &mut labels, &location)?,
                _ => {}
            },
            Event::Empty(e) if in_tags => collect_tag(&e, &mut labels, &location)?,
            Event::End(e) => match e.name().as_ref() {
                b"TEXT" => in_text = false,
                b"TAGS" => in_tags = false,
                _ => {}
            },
            Event::CData(c) if in_text => {
                let chunk = String::from_utf8_lossy(&c.into_inner()).into_owned();
                text.get_or_insert_with(String::new).push_str(&chunk);
            }
            Event::Text(t) if in_text => {
                let chunk = t
                    .unescape()
                    .map_err(|e| malformed(format!("bad text escape: {e}")))?;
                text.get_or_insert_with(String::new).push_str(&chunk);
            }
            Event::Eof => break,
            _ => {}
        }
    }

    let text = text.ok_or_else(|| malformed("missing <TEXT> element".into()))?;
    let notes = split_records(patient_id, &text)?;
    if notes.is_empty() {
        return Err(malformed("<TEXT> contains no records".into()));
    }
    Ok(Patient::new(patient_id, notes).with_labels(labels))
}

fn collect_tag(
    e: &quick_xml::events::BytesStart<'_>,
    labels: &mut BTreeMap<String, Decision>,
    location: &str,
) -> Result<(), CorpusError> {
    let name = String::from_utf8_lossy(e.name().as_ref()).into_owned();
    for attr in e.attributes() {
        let attr = attr.map_err(|err| CorpusError::MalformedRecord {
            location: format!("{location}, tag {name}"),
            detail: err.to_string(),
        })?;
        if attr.key.as_ref() == b"met" {
            let value = attr.unescape_value().map_err(|err| CorpusError::MalformedRecord {
                location: format!("{location}, tag {name}"),
                detail: err.to_string(),
            })?;
            let decision = value.parse::<Decision>().map_err(|err| CorpusError::MalformedRecord {
                location: format!("{location}, tag {name}"),
                detail: err.to_string(),
            })?;
            labels.insert(name.clone(), decision);
        }
    }
    Ok(())
}

fn is_separator(line: &str) -> bool {
    let t = line.trim();
    t.len() >= 5 && t.chars().all(|c| c == '*')
}

fn split_records(patient_id: &str, text: &str) -> Result<Vec<Note>, CorpusError> {
    let mut records: Vec<Vec<&str>> = vec![Vec::new()];
    for line in text.lines() {
        if is_separator(line) {
            records.push(Vec::new());
        } else {
            records.last_mut().expect("non-empty").push(line);
        }
    }

    let mut notes = Vec::new();
    for lines in records {
        let body = lines.join("\n");
        let body = body.trim_matches(|c| c == '\n' || c == '\r');
        if body.trim().is_empty() {
            continue;
        }
        let ordinal = notes.len() + 1;
        let note_id = format!("r{ordinal}");
        let location = format!("patient {patient_id:?}, record {ordinal}");
        let header = body
            .lines()
            .find_map(|l| {
                let t = l.trim();
                let lower = t.to_ascii_lowercase();
                lower.strip_prefix("record date:").map(|_| t["record date:".len()..].trim().to_string())
            })
            .ok_or_else(|| CorpusError::DateParse {
                location: location.clone(),
                value: None,
            })?;
        let date = parse_date(&header).ok_or_else(|| CorpusError::DateParse {
            location: location.clone(),
            value: Some(header.clone()),
        })?;
        notes.push(Note {
            note_id,
            patient_id: patient_id.to_string(),
            date,
            text: body.to_string(),
        });
    }
    Ok(notes)
}
