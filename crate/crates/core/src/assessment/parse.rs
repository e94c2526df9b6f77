use serde_json::{Map, Value};
use thiserror::Error;

use super::Confidence;
use crate::corpus::Decision;
use crate::prompting::SchemaConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParseErrorKind {
    InvalidJson,
    SchemaViolation,
    MissingCriterion,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("{} in job {job_id}{}: {detail}", self.code(), criterion.as_ref().map(|c| format!(", criterion {c}")).unwrap_or_default())]
pub struct ParseError {
    pub kind: ParseErrorKind,
    pub job_id: String,
    pub criterion: Option<String>,
    pub detail: String,
}

impl ParseError {
    pub fn code(&self) -> &'static str {
        match self.kind {
            ParseErrorKind::InvalidJson => "INVALID_JSON",
            ParseErrorKind::SchemaViolation => "SCHEMA_VIOLATION",
            ParseErrorKind::MissingCriterion => "MISSING_CRITERION",
        }
    }
}

/// One criterion's answer, with optional fields kept only when the schema
/// asked for them.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParsedAnswer {
    pub criterion_id: String,
    pub decision: Decision,
    pub medications: Option<Vec<String>>,
    pub rationale: Option<String>,
    pub confidence: Option<Confidence>,
}

/// Parses a model answer into one decision per expected criterion, in the
/// order of `expected`.
///
/// Tolerates code fences, surrounding prose, a single object instead of an
/// array, key and enum casing, and extra criteria (ignored with a warning).
pub fn parse_response(
    job_id: &str,
    text: &str,
    schema: &SchemaConfig,
    expected: &[String],
) -> Result<Vec<ParsedAnswer>, ParseError> {
    let err = |kind, criterion: Option<&str>, detail: String| ParseError {
        kind,
        job_id: job_id.to_string(),
        criterion: criterion.map(str::to_string),
        detail,
    };

    let value = extract_json(text).ok_or_else(|| err(ParseErrorKind::InvalidJson, None, "no JSON value found".into()))?;
    let objects = answer_objects(value)
        .ok_or_else(|| err(ParseErrorKind::SchemaViolation, None, "expected an array of answer objects".into()))?;

    let mut found: Vec<Option<ParsedAnswer>> = vec![None; expected.len()];
    for obj in objects {
        let obj = fold_keys(obj);
        let named = obj.get("criterion").and_then(Value::as_str).map(str::trim);
        let slot = match named {
            Some(name) => match expected.iter().position(|e| e.trim().eq_ignore_ascii_case(name)) {
                Some(i) => i,
                None => {
                    log::warn!("job {job_id}: ignoring answer for unrequested criterion {name:?}");
                    continue;
                }
            },
            None if expected.len() == 1 => 0,
            None => {
                return Err(err(ParseErrorKind::SchemaViolation, None, "answer object without a criterion".into()));
            }
        };
        let criterion_id = &expected[slot];
        if found[slot].is_some() {
            log::warn!("job {job_id}: duplicate answer for {criterion_id}; keeping the first");
            continue;
        }

        let decision = match obj.get("decision") {
            Some(Value::String(s)) => s.trim().parse::<Decision>().map_err(|_| {
                err(ParseErrorKind::SchemaViolation, Some(criterion_id), format!("unknown decision {s:?}"))
            })?,
            Some(Value::Bool(b)) => Decision::from_bool(*b),
            Some(other) => {
                return Err(err(ParseErrorKind::SchemaViolation, Some(criterion_id), format!("decision is not a string: {other}")));
            }
            None => return Err(err(ParseErrorKind::SchemaViolation, Some(criterion_id), "missing decision".into())),
        };

        let medications = schema.include_medications.then(|| obj.get("medications").and_then(medication_list)).flatten();
        let rationale = schema
            .include_rationale
            .then(|| obj.get("rationale").and_then(Value::as_str).map(|s| s.trim().to_string()))
            .flatten();
        let confidence = schema
            .include_confidence
            .then(|| {
                let raw = obj.get("confidence")?.as_str()?;
                let parsed = raw.parse::<Confidence>().ok();
                if parsed.is_none() {
                    log::warn!("job {job_id}: unrecognized confidence {raw:?} for {criterion_id}");
                }
                parsed
            })
            .flatten();

        found[slot] = Some(ParsedAnswer {
            criterion_id: criterion_id.clone(),
            decision,
            medications,
            rationale,
            confidence,
        });
    }

    found
        .into_iter()
        .zip(expected)
        .map(|(answer, id)| answer.ok_or_else(|| err(ParseErrorKind::MissingCriterion, Some(id), "no answer".into())))
        .collect()
}

/// Finds the JSON payload: the whole text, the first fenced block, or the
/// widest bracketed span.
fn extract_json(text: &str) -> Option<Value> {
    let trimmed = text.trim();
    if let Ok(v) = serde_json::from_str(trimmed) {
        return Some(v);
    }
    if let Some(inner) = fenced_block(trimmed) {
        if let Ok(v) = serde_json::from_str(inner.trim()) {
            return Some(v);
        }
    }
    for (open, close) in [('[', ']'), ('{', '}')] {
        if let (Some(start), Some(end)) = (trimmed.find(open), trimmed.rfind(close)) {
            if start < end {
                if let Ok(v) = serde_json::from_str(&trimmed[start..=end]) {
                    return Some(v);
                }
            }
        }
    }
    None
}

fn fenced_block(text: &str) -> Option<&str> {
    let start = text.find("```")? + 3;
    let rest = &text[start..];
    // Skip an info string such as "json".
    let body_start = rest.find('\n').map_or(0, |i| i + 1);
    let body = &rest[body_start..];
    let end = body.find("```").unwrap_or(body.len());
    Some(&body[..end])
}

fn answer_objects(value: Value) -> Option<Vec<Map<String, Value>>> {
    match value {
        Value::Array(items) => items
            .into_iter()
            .map(|v| match v {
                Value::Object(m) => Some(m),
                _ => None,
            })
            .collect(),
        Value::Object(m) => {
            let has_decision = m.keys().any(|k| k.trim().eq_ignore_ascii_case("decision"));
            if has_decision {
                return Some(vec![m]);
            }
            // A wrapper such as {"results": [...]}.
            let arrays: Vec<Value> = m.into_iter().map(|(_, v)| v).filter(Value::is_array).collect();
            match <[Value; 1]>::try_from(arrays) {
                Ok([inner]) => answer_objects(inner),
                Err(_) => None,
            }
        }
        _ => None,
    }
}

fn fold_keys(obj: Map<String, Value>) -> Map<String, Value> {
    let mut out = Map::new();
    for (k, v) in obj {
        out.entry(k.trim().to_lowercase()).or_insert(v);
    }
    out
}

fn medication_list(v: &Value) -> Option<Vec<String>> {
    match v {
        Value::Array(items) => Some(
            items
                .iter()
                .filter_map(|i| match i {
                    Value::String(s) => Some(s.trim().to_string()),
                    Value::Null => None,
                    other => Some(other.to_string()),
                })
                .filter(|s| !s.is_empty())
                .collect(),
        ),
        Value::String(s) if s.trim().is_empty() => Some(Vec::new()),
        Value::String(s) => Some(vec![s.trim().to_string()]),
        Value::Null => Some(Vec::new()),
        _ => None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ids(list: &[&str]) -> Vec<String> {
        list.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn well_formed_array() {
        let expected = ids(&["A", "B"]);
        let text = r#"[{"criterion":"B","decision":"MET","rationale":"r","confidence":"high","medications":["x"]},
                       {"criterion":"A","decision":"NOT MET"}]"#;
        let out = parse_response("j", text, &SchemaConfig::default(), &expected).unwrap();
        assert_eq!(out[0].criterion_id, "A");
        assert_eq!(out[0].decision, Decision::NotMet);
        assert_eq!(out[1].decision, Decision::Met);
        assert_eq!(out[1].confidence, Some(Confidence::High));
        assert_eq!(out[1].medications.as_deref(), Some(&["x".to_string()][..]));
    }

    #[test]
    fn lenient_forms() {
        let one = ids(&["ENGLISH"]);
        let schema = SchemaConfig::default();
        for text in [
            "```json\n[{\"criterion\": \"english\", \"decision\": \"not met\"}]\n```",
            "Here you go: {\"Criterion\": \"ENGLISH\", \"DECISION\": \" Not_Met \"} Hope this helps.",
            "{\"decision\": \"NOT MET\"}",
            "{\"results\": [{\"criterion\": \"ENGLISH\", \"decision\": \"notmet\"}]}",
        ] {
            let out = parse_response("j", text, &schema, &one).unwrap_or_else(|e| panic!("{text}: {e}"));
            assert_eq!(out[0].decision, Decision::NotMet, "{text}");
        }
    }

    #[test]
    fn disabled_fields_dropped() {
        let schema = SchemaConfig {
            include_medications: false,
            include_rationale: false,
            include_confidence: false,
            few_shot_example: None,
        };
        let text = r#"[{"criterion":"A","decision":"MET","rationale":"r","confidence":"High","medications":["m"]}]"#;
        let out = parse_response("j", text, &schema, &ids(&["A"])).unwrap();
        assert_eq!(out[0].rationale, None);
        assert_eq!(out[0].confidence, None);
        assert_eq!(out[0].medications, None);
    }

    #[test]
    fn error_kinds() {
        let schema = SchemaConfig::default();
        let e = parse_response("j7", "not json at all", &schema, &ids(&["A"])).unwrap_err();
        assert_eq!(e.code(), "INVALID_JSON");

        let e = parse_response("j7", r#"{"decision": "MAYBE"}"#, &schema, &ids(&["HBA1C"])).unwrap_err();
        assert_eq!(e.code(), "SCHEMA_VIOLATION");
        let msg = e.to_string();
        assert!(msg.contains("j7") && msg.contains("HBA1C"), "{msg}");

        let e = parse_response("j", r#"[{"criterion":"A","decision":"MET"}]"#, &schema, &ids(&["A", "B"])).unwrap_err();
        assert_eq!(e.code(), "MISSING_CRITERION");
        assert_eq!(e.criterion.as_deref(), Some("B"));

        let e = parse_response("j", r#"[{"criterion":"A"}]"#, &schema, &ids(&["A"])).unwrap_err();
        assert_eq!(e.code(), "SCHEMA_VIOLATION");
    }

    #[test]
    fn extra_criteria_ignored() {
        let text = r#"[{"criterion":"A","decision":"MET"},{"criterion":"Z","decision":"MET"}]"#;
        let out = parse_response("j", text, &SchemaConfig::default(), &ids(&["A"])).unwrap();
        assert_eq!(out.len(), 1);
    }

    proptest! {
        #[test]
        fn never_panics_on_arbitrary_text(text in ".{0,200}") {
            let _ = parse_response("j", &text, &SchemaConfig::default(), &ids(&["A", "B"]));
        }

        #[test]
        fn never_panics_on_arbitrary_bytes(bytes in proptest::collection::vec(any::<u8>(), 0..200)) {
            let text = String::from_utf8_lossy(&bytes);
            let _ = parse_response("j", &text, &SchemaConfig::default(), &ids(&["A"]));
        }

        #[test]
        fn never_panics_on_json_like(text in r#"[\[\]{}":, a-zA-Z_\-`\n]{0,120}"#) {
            let _ = parse_response("j", &text, &SchemaConfig::default(), &ids(&["a"]));
        }
    }
}
