//! Prompt planning and rendering for the four prompting strategies.

mod template;

use std::fmt;
use std::str::FromStr;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{CriterionSpec, Patient, DATE_FORMAT};
use crate::embedding::{Chunk, EmbeddingError, EmbeddingIndex, QueryKey};
use crate::tokenize::TokenCounter;

pub use template::{
    few_shot_block, output_format, PromptTemplate, TemplateSet, DEFAULT_DENY_CLAUSE, PLACEHOLDER_CRITERIA,
    PLACEHOLDER_DATE, PLACEHOLDER_FEW_SHOT, PLACEHOLDER_FORMAT, PLACEHOLDER_NOTE,
};

#[derive(Debug, Error)]
pub enum PromptError {
    #[error("no criteria to assess")]
    EmptyCriteria,
    #[error("prompt {job_id} needs {tokens} tokens but the backend accepts {limit}; use retrieval to shorten it")]
    PromptOverflow { job_id: String, tokens: usize, limit: usize },
    #[error("template is missing the {{{0}}} placeholder")]
    MissingPlaceholder(String),
    #[error("retrieval failed: {0}")]
    Retrieval(#[from] EmbeddingError),
    #[error("cannot read template: {0}")]
    Io(String),
}

impl PromptError {
    pub fn code(&self) -> &'static str {
        match self {
            PromptError::EmptyCriteria => "EMPTY_CRITERIA",
            PromptError::PromptOverflow { .. } => "PROMPT_OVERFLOW",
            PromptError::MissingPlaceholder(_) => "MISSING_PLACEHOLDER",
            PromptError::Retrieval(e) => e.code(),
            PromptError::Io(_) => "IO_ERROR",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Mode {
    All,
    Individual,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Strategy {
    Acan,
    Acin,
    Ican,
    Icin,
}

impl Strategy {
    pub const ALL: [Strategy; 4] = [Strategy::Acan, Strategy::Acin, Strategy::Ican, Strategy::Icin];

    pub fn from_modes(criteria: Mode, notes: Mode) -> Self {
        match (criteria, notes) {
            (Mode::All, Mode::All) => Strategy::Acan,
            (Mode::All, Mode::Individual) => Strategy::Acin,
            (Mode::Individual, Mode::All) => Strategy::Ican,
            (Mode::Individual, Mode::Individual) => Strategy::Icin,
        }
    }

    pub fn criteria_mode(self) -> Mode {
        match self {
            Strategy::Acan | Strategy::Acin => Mode::All,
            Strategy::Ican | Strategy::Icin => Mode::Individual,
        }
    }

    pub fn notes_mode(self) -> Mode {
        match self {
            Strategy::Acan | Strategy::Ican => Mode::All,
            Strategy::Acin | Strategy::Icin => Mode::Individual,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::Acan => "ACAN",
            Strategy::Acin => "ACIN",
            Strategy::Ican => "ICAN",
            Strategy::Icin => "ICIN",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Strategy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Strategy::ALL
            .into_iter()
            .find(|st| st.as_str().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| format!("unknown strategy {s:?} (expected acan, acin, ican or icin)"))
    }
}

/// Which answer fields the model is asked for. `criterion` and `decision`
/// are always requested.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct SchemaConfig {
    pub include_medications: bool,
    pub include_rationale: bool,
    pub include_confidence: bool,
    /// A worked note-plus-answer example placed before the patient records.
    pub few_shot_example: Option<String>,
}

impl Default for SchemaConfig {
    fn default() -> Self {
        SchemaConfig {
            include_medications: true,
            include_rationale: true,
            include_confidence: true,
            few_shot_example: None,
        }
    }
}

/// A note, or a chunk of one, injected into a prompt.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Segment {
    pub note_date: NaiveDate,
    pub note_id: String,
    /// `None` when the whole note is injected.
    pub chunk_index: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptJob {
    pub job_id: String,
    pub patient_id: String,
    pub strategy: Strategy,
    pub criteria_ids: Vec<String>,
    /// Injected content in chronological order.
    pub segments: Vec<Segment>,
    pub rendered_text: String,
    pub current_date: NaiveDate,
    pub prompt_token_count: usize,
}

impl PromptJob {
    /// The date decisions from this job are attributed to: the injected
    /// note's date for per-note strategies, none otherwise.
    pub fn note_date(&self) -> Option<NaiveDate> {
        match self.strategy.notes_mode() {
            Mode::Individual => self.segments.first().map(|s| s.note_date),
            Mode::All => None,
        }
    }

    /// The note id for per-note strategies.
    pub fn note_id(&self) -> Option<&str> {
        match self.strategy.notes_mode() {
            Mode::Individual => self.segments.first().map(|s| s.note_id.as_str()),
            Mode::All => None,
        }
    }
}

/// Text injected for one note: the whole note, or its selected chunks.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NoteExcerpt {
    pub note_id: String,
    pub note_date: NaiveDate,
    pub text: String,
}

pub struct PromptInput<'a> {
    pub criteria: Vec<&'a CriterionSpec>,
    pub notes: Vec<NoteExcerpt>,
    pub current_date: NaiveDate,
}

/// Retrieval pre-filter: keep the `k` best chunks per query.
#[derive(Clone, Copy)]
pub struct Retrieval<'a> {
    pub index: &'a EmbeddingIndex,
    pub k: usize,
}

pub struct PlanOptions<'a> {
    pub schema: &'a SchemaConfig,
    pub templates: &'a TemplateSet,
    pub tokenizer: &'a dyn TokenCounter,
    /// Prompts longer than this fail with `PROMPT_OVERFLOW`.
    pub context_limit: Option<usize>,
    pub retrieval: Option<Retrieval<'a>>,
}

pub fn render_section_criteria(criteria: &[&CriterionSpec]) -> String {
    criteria
        .iter()
        .map(|c| format!("- {}: {}", c.criterion_id, c.definition))
        .collect::<Vec<_>>()
        .join("\n")
}

pub fn render_notes(notes: &[NoteExcerpt]) -> String {
    notes
        .iter()
        .map(|n| format!("## Note {} ({})\n{}", n.note_id, n.note_date.format(DATE_FORMAT), n.text))
        .collect::<Vec<_>>()
        .join("\n\n")
}

/// Substitutes the prompt input into a template. A template without
/// `{output_format}` gets the answer format appended; a few-shot example
/// needs an explicit `{few_shot}` slot.
pub fn render_prompt(template: &PromptTemplate, input: &PromptInput<'_>, schema: &SchemaConfig) -> Result<String, PromptError> {
    if schema.few_shot_example.is_some() && !template.has_placeholder(PLACEHOLDER_FEW_SHOT) {
        return Err(PromptError::MissingPlaceholder(PLACEHOLDER_FEW_SHOT.into()));
    }
    let format = output_format(schema);
    let mut text = template.substitute(|name| match name {
        PLACEHOLDER_NOTE => Some(render_notes(&input.notes)),
        PLACEHOLDER_CRITERIA => Some(render_section_criteria(&input.criteria)),
        PLACEHOLDER_DATE => Some(input.current_date.format(DATE_FORMAT).to_string()),
        PLACEHOLDER_FORMAT => Some(format.clone()),
        PLACEHOLDER_FEW_SHOT => Some(few_shot_block(schema.few_shot_example.as_deref())),
        _ => None,
    });
    if !template.has_placeholder(PLACEHOLDER_FORMAT) {
        text.push_str("\n\n");
        text.push_str(&format);
    }
    Ok(text)
}

/// Groups chronologically ordered chunks by note. Adjacent chunks of a note
/// are joined without a separator, so selecting every chunk reproduces the
/// note text exactly; gaps are marked by a newline.
pub fn group_chunks(chunks: &[&Chunk]) -> Vec<NoteExcerpt> {
    let mut out: Vec<NoteExcerpt> = Vec::new();
    let mut last: Option<&Chunk> = None;
    for &chunk in chunks {
        match (out.last_mut(), last) {
            (Some(excerpt), Some(prev)) if prev.note_id == chunk.note_id && prev.note_date == chunk.note_date => {
                if chunk.chunk_index != prev.chunk_index + 1 {
                    excerpt.text.push('\n');
                }
                excerpt.text.push_str(&chunk.text);
            }
            _ => out.push(NoteExcerpt {
                note_id: chunk.note_id.clone(),
                note_date: chunk.note_date,
                text: chunk.text.clone(),
            }),
        }
        last = Some(chunk);
    }
    out
}

/// One unit along the notes axis: the content of a single prompt.
struct Unit {
    segments: Vec<Segment>,
    notes: Vec<NoteExcerpt>,
}

fn full_note_units(patient: &Patient, mode: Mode) -> Vec<Unit> {
    let unit_of = |notes: &[crate::corpus::Note]| Unit {
        segments: notes
            .iter()
            .map(|n| Segment {
                note_date: n.date,
                note_id: n.note_id.clone(),
                chunk_index: None,
            })
            .collect(),
        notes: notes
            .iter()
            .map(|n| NoteExcerpt {
                note_id: n.note_id.clone(),
                note_date: n.date,
                text: n.text.clone(),
            })
            .collect(),
    };
    match mode {
        Mode::All => vec![unit_of(&patient.notes)],
        Mode::Individual => patient.notes.chunks(1).map(unit_of).collect(),
    }
}

fn chunk_units(chunks: &[&Chunk], mode: Mode) -> Vec<Unit> {
    let unit_of = |chunks: &[&Chunk]| Unit {
        segments: chunks
            .iter()
            .map(|c| Segment {
                note_date: c.note_date,
                note_id: c.note_id.clone(),
                chunk_index: Some(c.chunk_index),
            })
            .collect(),
        notes: group_chunks(chunks),
    };
    match mode {
        Mode::All => vec![unit_of(chunks)],
        Mode::Individual => chunks.chunks(1).map(unit_of).collect(),
    }
}

/// Plans every prompt for one patient. Job counts are 1, N, C and N·C for
/// ACAN, ACIN, ICAN and ICIN, where N is the note count, or the number of
/// retrieved chunks under retrieval.
pub fn plan_prompts(
    strategy: Strategy,
    patient: &Patient,
    criteria: &[CriterionSpec],
    options: &PlanOptions<'_>,
) -> Result<Vec<PromptJob>, PromptError> {
    if criteria.is_empty() {
        return Err(PromptError::EmptyCriteria);
    }
    if let Some(r) = options.retrieval {
        if !r.index.covers_patient(&patient.patient_id) {
            return Err(EmbeddingError::UnknownPatient(patient.patient_id.clone()).into());
        }
    }
    let current_date = patient.reference_date();
    let template = match strategy.criteria_mode() {
        Mode::All => &options.templates.all_criteria,
        Mode::Individual => &options.templates.individual_criteria,
    };
    let groups: Vec<Vec<&CriterionSpec>> = match strategy.criteria_mode() {
        Mode::All => vec![criteria.iter().collect()],
        Mode::Individual => criteria.iter().map(|c| vec![c]).collect(),
    };

    let mut jobs = Vec::new();
    for group in groups {
        let units = match options.retrieval {
            None => full_note_units(patient, strategy.notes_mode()),
            Some(r) => {
                let query = match strategy.criteria_mode() {
                    Mode::All => QueryKey::Concat,
                    Mode::Individual => QueryKey::Criterion(group[0].criterion_id.clone()),
                };
                let selected = r.index.top_k_chunks(&patient.patient_id, &query, r.k)?;
                chunk_units(&selected, strategy.notes_mode())
            }
        };
        for unit in units {
            let input = PromptInput {
                criteria: group.clone(),
                notes: unit.notes,
                current_date,
            };
            let rendered_text = render_prompt(template, &input, options.schema)?;
            let prompt_token_count = options.tokenizer.count(&rendered_text);
            let job_id = format!("{}/{}/{}", patient.patient_id, strategy.as_str().to_ascii_lowercase(), jobs.len());
            if let Some(limit) = options.context_limit {
                if prompt_token_count > limit {
                    return Err(PromptError::PromptOverflow {
                        job_id,
                        tokens: prompt_token_count,
                        limit,
                    });
                }
            }
            jobs.push(PromptJob {
                job_id,
                patient_id: patient.patient_id.clone(),
                strategy,
                criteria_ids: group.iter().map(|c| c.criterion_id.clone()).collect(),
                segments: unit.segments,
                rendered_text,
                current_date,
                prompt_token_count,
            });
        }
    }
    Ok(jobs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{Aggregation, Corpus, Note};
    use crate::embedding::{HashingEmbedder, IndexConfig};
    use crate::tokenize::WhitespaceTokenCounter;

    fn note(id: &str, date: &str, text: &str) -> Note {
        Note {
            note_id: id.into(),
            patient_id: "p".into(),
            date: NaiveDate::parse_from_str(date, DATE_FORMAT).unwrap(),
            text: text.into(),
        }
    }

    fn options<'a>(schema: &'a SchemaConfig, templates: &'a TemplateSet) -> PlanOptions<'a> {
        PlanOptions {
            schema,
            templates,
            tokenizer: &WhitespaceTokenCounter,
            context_limit: None,
            retrieval: None,
        }
    }

    #[test]
    fn strategy_modes_round_trip() {
        for s in Strategy::ALL {
            assert_eq!(Strategy::from_modes(s.criteria_mode(), s.notes_mode()), s);
            assert_eq!(s.as_str().to_lowercase().parse::<Strategy>().unwrap(), s);
        }
        assert!("acxn".parse::<Strategy>().is_err());
    }

    #[test]
    fn single_note_single_criterion_gives_one_job_everywhere() {
        let p = Patient::new("p", vec![note("n1", "2024-06-01", "X")]);
        let criteria = vec![CriterionSpec::new("C", "def", Aggregation::Max)];
        let (schema, templates) = (SchemaConfig::default(), TemplateSet::default());
        for s in Strategy::ALL {
            let jobs = plan_prompts(s, &p, &criteria, &options(&schema, &templates)).unwrap();
            assert_eq!(jobs.len(), 1, "{s}");
            assert!(jobs[0].rendered_text.contains("X"));
            assert!(jobs[0].rendered_text.contains("2024-06-01"));
            assert_eq!(jobs[0].current_date, p.reference_date());
        }
    }

    #[test]
    fn empty_criteria_rejected() {
        let p = Patient::new("p", vec![note("n1", "2024-06-01", "X")]);
        let (schema, templates) = (SchemaConfig::default(), TemplateSet::default());
        let err = plan_prompts(Strategy::Acan, &p, &[], &options(&schema, &templates)).unwrap_err();
        assert_eq!(err.code(), "EMPTY_CRITERIA");
    }

    #[test]
    fn overflow_is_reported() {
        let p = Patient::new("p", vec![note("n1", "2024-06-01", &"word ".repeat(500))]);
        let criteria = vec![CriterionSpec::new("C", "def", Aggregation::Max)];
        let (schema, templates) = (SchemaConfig::default(), TemplateSet::default());
        let mut opts = options(&schema, &templates);
        opts.context_limit = Some(300);
        let err = plan_prompts(Strategy::Acan, &p, &criteria, &opts).unwrap_err();
        assert_eq!(err.code(), "PROMPT_OVERFLOW");
    }

    #[test]
    fn notes_injected_in_chronological_order() {
        let p = Patient::new(
            "p",
            vec![note("b", "2024-03-01", "LATER"), note("a", "2024-01-01", "EARLIER")],
        );
        let criteria = vec![CriterionSpec::new("C", "def", Aggregation::Max)];
        let (schema, templates) = (SchemaConfig::default(), TemplateSet::default());
        let job = &plan_prompts(Strategy::Acan, &p, &criteria, &options(&schema, &templates)).unwrap()[0];
        let (e, l) = (job.rendered_text.find("EARLIER").unwrap(), job.rendered_text.find("LATER").unwrap());
        assert!(e < l);
        assert_eq!(job.current_date.to_string(), "2024-03-01");
        assert_eq!(job.prompt_token_count, WhitespaceTokenCounter.count(&job.rendered_text));
    }

    #[test]
    fn few_shot_and_custom_templates() {
        let p = Patient::new("p", vec![note("n1", "2024-06-01", "X")]);
        let criteria = vec![CriterionSpec::new("C", "def", Aggregation::Max)];
        let schema = SchemaConfig {
            few_shot_example: Some("EXAMPLE NOTE\n[{\"criterion\": \"C\", \"decision\": \"MET\"}]".into()),
            ..Default::default()
        };
        let templates = TemplateSet::default();
        let job = &plan_prompts(Strategy::Ican, &p, &criteria, &options(&schema, &templates)).unwrap()[0];
        assert!(job.rendered_text.find("EXAMPLE NOTE").unwrap() < job.rendered_text.find("## Note n1").unwrap());

        let bare = PromptTemplate::new("bare", "{section_criteria}\n{note}\n{current_date}").unwrap();
        let set = TemplateSet {
            all_criteria: bare.clone(),
            individual_criteria: bare,
        };
        let err = plan_prompts(Strategy::Ican, &p, &criteria, &options(&schema, &set)).unwrap_err();
        assert_eq!(err.code(), "MISSING_PLACEHOLDER");
        let plain = SchemaConfig::default();
        let job = &plan_prompts(Strategy::Ican, &p, &criteria, &options(&plain, &set)).unwrap()[0];
        assert!(job.rendered_text.contains(DEFAULT_DENY_CLAUSE));
    }

    #[test]
    fn full_retrieval_matches_full_notes() {
        let words: String = (0..1200).map(|i| format!("w{i} ")).collect();
        let corpus = Corpus::new(vec![Patient::new(
            "p",
            vec![note("a", "2024-01-01", &words), note("b", "2024-02-01", "short note")],
        )])
        .unwrap();
        let criteria = vec![CriterionSpec::new("C", "w5 w6", Aggregation::Max)];
        let index = EmbeddingIndex::build(
            &corpus,
            &criteria,
            &HashingEmbedder::default(),
            &WhitespaceTokenCounter,
            &IndexConfig::default(),
        )
        .unwrap();
        let (schema, templates) = (SchemaConfig::default(), TemplateSet::default());
        let patient = &corpus.patients()[0];
        let plain = plan_prompts(Strategy::Acan, patient, &criteria, &options(&schema, &templates)).unwrap();
        let mut opts = options(&schema, &templates);
        opts.retrieval = Some(Retrieval { index: &index, k: 100 });
        let retrieved = plan_prompts(Strategy::Acan, patient, &criteria, &opts).unwrap();
        assert_eq!(plain[0].rendered_text, retrieved[0].rendered_text);

        opts.retrieval = Some(Retrieval { index: &index, k: 2 });
        let acin = plan_prompts(Strategy::Acin, patient, &criteria, &opts).unwrap();
        assert_eq!(acin.len(), 2);
        assert!(acin.iter().all(|j| j.segments.len() == 1 && j.segments[0].chunk_index.is_some()));
    }
}
