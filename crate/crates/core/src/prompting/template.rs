use std::path::Path;

use super::{PromptError, SchemaConfig};

pub const PLACEHOLDER_NOTE: &str = "note";
pub const PLACEHOLDER_CRITERIA: &str = "section_criteria";
pub const PLACEHOLDER_DATE: &str = "current_date";
pub const PLACEHOLDER_FORMAT: &str = "output_format";
pub const PLACEHOLDER_FEW_SHOT: &str = "few_shot";

const REQUIRED: [&str; 3] = [PLACEHOLDER_NOTE, PLACEHOLDER_CRITERIA, PLACEHOLDER_DATE];
const KNOWN: [&str; 5] = [
    PLACEHOLDER_NOTE,
    PLACEHOLDER_CRITERIA,
    PLACEHOLDER_DATE,
    PLACEHOLDER_FORMAT,
    PLACEHOLDER_FEW_SHOT,
];

/// Phrase the decision rule uses to make unanswerable criteria default to
/// NOT MET.
pub const DEFAULT_DENY_CLAUSE: &str = "impossible to assess given the provided information";

/// A prompt template with `{name}` placeholders. Only the five known names
/// are substituted; any other braces (for example JSON in the instructions)
/// pass through untouched.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplate {
    name: String,
    text: String,
}

impl PromptTemplate {
    pub fn new(name: impl Into<String>, text: impl Into<String>) -> Result<Self, PromptError> {
        let text = text.into();
        let present = placeholders(&text);
        if let Some(missing) = REQUIRED.iter().find(|r| !present.contains(r)) {
            return Err(PromptError::MissingPlaceholder(missing.to_string()));
        }
        Ok(PromptTemplate { name: name.into(), text })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, PromptError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| PromptError::Io(format!("{}: {e}", path.display())))?;
        let name = path.file_stem().map_or_else(|| path.display().to_string(), |s| s.to_string_lossy().into_owned());
        Self::new(name, text)
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn text(&self) -> &str {
        &self.text
    }

    pub fn has_placeholder(&self, name: &str) -> bool {
        placeholders(&self.text).contains(&name)
    }

    /// Single-pass substitution, so placeholder-like text inside notes is
    /// never expanded.
    pub fn substitute(&self, lookup: impl Fn(&str) -> Option<String>) -> String {
        let mut out = String::with_capacity(self.text.len());
        let mut rest = self.text.as_str();
        while let Some(open) = rest.find('{') {
            out.push_str(&rest[..open]);
            let after = &rest[open + 1..];
            match after.find('}').map(|close| (&after[..close], close)) {
                Some((name, close)) if KNOWN.contains(&name) => {
                    out.push_str(&lookup(name).unwrap_or_default());
                    rest = &after[close + 1..];
                }
                _ => {
                    out.push('{');
                    rest = after;
                }
            }
        }
        out.push_str(rest);
        out
    }
}

fn placeholders(text: &str) -> Vec<&'static str> {
    KNOWN
        .iter()
        .copied()
        .filter(|name| text.contains(&format!("{{{name}}}")))
        .collect()
}

/// The pair of templates used by the all-criteria and single-criterion
/// strategies.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TemplateSet {
    pub all_criteria: PromptTemplate,
    pub individual_criteria: PromptTemplate,
}

impl Default for TemplateSet {
    fn default() -> Self {
        TemplateSet {
            all_criteria: PromptTemplate::new("all_criteria.v1", include_str!("../../templates/all_criteria.v1.txt"))
                .expect("bundled template is valid"),
            individual_criteria: PromptTemplate::new(
                "individual_criteria.v1",
                include_str!("../../templates/individual_criteria.v1.txt"),
            )
            .expect("bundled template is valid"),
        }
    }
}

/// Instructions describing the JSON answer, shaped by the schema switches.
pub fn output_format(schema: &SchemaConfig) -> String {
    let mut lines = vec![
        "Reply with a JSON array only, containing one object per criterion above, in the order listed. Each object has these fields:".to_string(),
        "- \"criterion\": the criterion identifier exactly as written above".to_string(),
    ];
    if schema.include_medications {
        lines.push("- \"medications\": a list of the patient's medications relevant to the criterion (an empty list if none)".into());
    }
    if schema.include_rationale {
        lines.push("- \"rationale\": a short explanation pointing to the evidence in the records".into());
    }
    lines.push("- \"decision\": \"MET\" if the patient meets the criterion, otherwise \"NOT MET\"".into());
    if schema.include_confidence {
        lines.push("- \"confidence\": how sure you are, one of \"Low\", \"Medium\", or \"High\"".into());
    }
    lines.push(format!(
        "If the criterion is {DEFAULT_DENY_CLAUSE}, the decision is \"NOT MET\"."
    ));
    lines.join("\n")
}

pub fn few_shot_block(example: Option<&str>) -> String {
    match example {
        Some(ex) if !ex.trim().is_empty() => format!("# Worked example\n{}\n\n", ex.trim_end()),
        _ => String::new(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn missing_required_placeholder() {
        let err = PromptTemplate::new("t", "{note} {current_date}").unwrap_err();
        assert_eq!(err.code(), "MISSING_PLACEHOLDER");
        assert!(err.to_string().contains("section_criteria"));
    }

    #[test]
    fn substitution_is_single_pass_and_leaves_other_braces() {
        let t = PromptTemplate::new("t", "{\"a\": 1} {note}|{section_criteria}|{current_date}|{unknown}").unwrap();
        let out = t.substitute(|name| match name {
            "note" => Some("text with {current_date} inside".into()),
            "section_criteria" => Some("C".into()),
            "current_date" => Some("2024-06-01".into()),
            _ => None,
        });
        assert_eq!(out, "{\"a\": 1} text with {current_date} inside|C|2024-06-01|{unknown}");
    }

    #[test]
    fn format_respects_switches() {
        let full = output_format(&SchemaConfig::default());
        for field in ["\"criterion\"", "\"medications\"", "\"rationale\"", "\"decision\"", "\"confidence\""] {
            assert!(full.contains(field), "{field}");
        }
        assert!(full.contains(DEFAULT_DENY_CLAUSE));
        let lean = output_format(&SchemaConfig {
            include_rationale: false,
            include_medications: false,
            include_confidence: false,
            few_shot_example: None,
        });
        assert!(!lean.contains("rationale"));
        assert!(!lean.contains("medications"));
        assert!(!lean.contains("confidence"));
        assert!(lean.contains("\"decision\""));
    }

    #[test]
    fn bundled_templates_carry_optional_slots() {
        let set = TemplateSet::default();
        for t in [&set.all_criteria, &set.individual_criteria] {
            assert!(t.has_placeholder(PLACEHOLDER_FORMAT));
            assert!(t.has_placeholder(PLACEHOLDER_FEW_SHOT));
        }
    }
}
