//! Deterministic synthetic corpora with planted, machine-checkable facts.
//!
//! Every MET fact is a sentinel line `[[FACT <criterion_id> MET]]` followed by
//! a short evidence phrase lifted from the criterion definition (so that
//! embedding retrieval has lexical signal to find it). Criteria aggregated
//! with `min` default to MET and carry the inverted sentinel
//! `[[FACT <criterion_id> NOTMET]]` when the patient fails them.
//!
//! Placement follows the aggregation policy so that aggregating per-note
//! sentinel presence reproduces the ground truth:
//! - `max`: any note (scattered) or the latest note (clustered)
//! - `min`: the inverted sentinel in one note
//! - `most_recent`: the latest note, which is always inside the window

use std::collections::BTreeMap;

use chrono::{Days, Months, NaiveDate};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::criteria::{validate_criteria, Aggregation, CriterionSpec};
use super::{canonical_criteria, canonical_prevalence, Corpus, CorpusError, Decision, GroundTruth, Note, Patient};

pub const SENTINEL_PREFIX: &str = "[[FACT ";

/// Whitespace tokens in a sentinel (`[[FACT`, id, `MET]]`).
const SENTINEL_TOKENS: usize = 3;
const EVIDENCE_WORDS: usize = 12;

pub fn met_sentinel(criterion_id: &str) -> String {
    format!("[[FACT {criterion_id} MET]]")
}

pub fn not_met_sentinel(criterion_id: &str) -> String {
    format!("[[FACT {criterion_id} NOTMET]]")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FactPlacement {
    /// Facts land at random positions in policy-compatible notes.
    #[default]
    Scattered,
    /// All of a patient's facts form one block at the top of the latest note.
    Clustered,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticConfig {
    pub n_patients: usize,
    pub min_notes: usize,
    pub max_notes: usize,
    /// When set, note counts are distributed so the corpus has exactly this many notes.
    pub total_notes: Option<usize>,
    pub criteria: Vec<CriterionSpec>,
    /// Per-criterion probability of MET; falls back to `default_met_rate`.
    pub met_rate: BTreeMap<String, f64>,
    pub default_met_rate: f64,
    /// Approximate filler words per note (padding for alignment may add a few).
    pub filler_words: usize,
    pub placement: FactPlacement,
    /// Keep every sentinel inside one chunk of this many whitespace tokens.
    pub align_to_window: Option<usize>,
    /// Plant MET sentinels in notes outside the window of NOT-MET
    /// `most_recent` criteria. Exercises window semantics; merged-note
    /// prompts cannot resolve these, so leave off for end-to-end runs.
    pub out_of_window_distractors: bool,
    /// Upper bound for the latest note date of any patient.
    pub latest_date: NaiveDate,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            n_patients: 10,
            min_notes: 2,
            max_notes: 5,
            total_notes: None,
            criteria: canonical_criteria(),
            met_rate: canonical_prevalence(),
            default_met_rate: 0.5,
            filler_words: 200,
            placement: FactPlacement::Scattered,
            align_to_window: Some(512),
            out_of_window_distractors: false,
            latest_date: NaiveDate::from_ymd_opt(2023, 12, 31).expect("valid date"),
        }
    }
}

impl SyntheticConfig {
    /// 86 patients with 377 notes over the 13 canonical criteria.
    pub fn n2c2_test_shape() -> Self {
        SyntheticConfig {
            n_patients: 86,
            total_notes: Some(377),
            ..Default::default()
        }
    }

    /// Every criterion MET with probability 0.5, so both classes are
    /// represented once the corpus has a few dozen patients.
    pub fn balanced(n_patients: usize) -> Self {
        SyntheticConfig {
            n_patients,
            met_rate: BTreeMap::new(),
            default_met_rate: 0.5,
            ..Default::default()
        }
    }

    fn validate(&self) -> Result<(), CorpusError> {
        let invalid = |m: String| Err(CorpusError::InvalidConfig(m));
        if self.n_patients == 0 {
            return invalid("n_patients must be positive".into());
        }
        if self.min_notes == 0 || self.min_notes > self.max_notes {
            return invalid(format!(
                "notes per patient range {}..={} is empty or starts at zero",
                self.min_notes, self.max_notes
            ));
        }
        if let Some(total) = self.total_notes {
            let (lo, hi) = (self.n_patients * self.min_notes, self.n_patients * self.max_notes);
            if total < lo || total > hi {
                return invalid(format!("total_notes {total} outside feasible range {lo}..={hi}"));
            }
        }
        if self.criteria.is_empty() {
            return invalid("at least one criterion is required".into());
        }
        validate_criteria(&self.criteria).map_err(|e| CorpusError::InvalidConfig(e.to_string()))?;
        if let Some(c) = self.criteria.iter().find(|c| c.criterion_id.chars().any(char::is_whitespace)) {
            return invalid(format!("criterion id {:?} contains whitespace", c.criterion_id));
        }
        for (id, rate) in self.met_rate.iter().map(|(k, v)| (k.as_str(), *v)).chain([("default", self.default_met_rate)]) {
            if !(0.0..=1.0).contains(&rate) {
                return invalid(format!("met_rate for {id} is {rate}, expected a value in [0, 1]"));
            }
        }
        if self.align_to_window == Some(0) {
            return invalid("align_to_window must be positive".into());
        }
        Ok(())
    }

    fn rate_for(&self, criterion_id: &str) -> f64 {
        self.met_rate.get(criterion_id).copied().unwrap_or(self.default_met_rate)
    }
}

const VOCAB: &[&str] = &[
    "afebrile", "vitals", "stable", "lungs", "clear", "bilaterally", "auscultation", "regular", "rhythm",
    "murmurs", "rubs", "gallops", "soft", "nontender", "nondistended", "extremities", "warm", "alert",
    "oriented", "ambulating", "tolerating", "diet", "denies", "reports", "fevers", "chills", "cough",
    "headache", "sleeping", "well", "appetite", "good", "follow-up", "clinic", "visit", "routine",
    "exam", "unremarkable", "pulses", "palpable", "intact", "gait", "steady", "mood", "appropriate",
    "weight", "unchanged", "plan", "continue", "monitor", "return", "weeks", "labs", "pending",
    "discussed", "counseling", "provided", "questions", "answered", "today", "comfortable", "resting",
    "nursing", "staff", "notified", "overnight", "uneventful", "morning", "afternoon", "systems",
    "negative", "otherwise", "baseline", "hydration", "adequate", "ambulatory", "seen", "examined",
];

/// Generates a corpus and its labels. Equal `(config, seed)` always yields
/// byte-identical output.
pub fn generate_synthetic_corpus(config: &SyntheticConfig, seed: u64) -> Result<(Corpus, GroundTruth), CorpusError> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let note_counts = distribute_notes(config, &mut rng);
    let mut patients = Vec::with_capacity(config.n_patients);
    let mut truth = GroundTruth::new();

    for (p_idx, &n_notes) in note_counts.iter().enumerate() {
        let patient_id = format!("P{:04}", p_idx + 1);
        let dates = note_dates(config.latest_date, n_notes, &mut rng);
        let reference = *dates.last().expect("at least one note");
        let last = n_notes - 1;

        let mut labels = BTreeMap::new();
        let mut facts: Vec<Vec<Vec<String>>> = vec![Vec::new(); n_notes];
        for criterion in &config.criteria {
            let met = rng.gen::<f64>() < config.rate_for(&criterion.criterion_id);
            let decision = Decision::from_bool(met);
            labels.insert(criterion.criterion_id.clone(), decision);
            truth.insert(patient_id.clone(), criterion.criterion_id.clone(), decision);

            match (criterion.aggregation, decision) {
                (Aggregation::Max, Decision::Met) => match config.placement {
                    FactPlacement::Clustered => facts[last].push(fact_line(criterion, true)),
                    FactPlacement::Scattered => {
                        let target = rng.gen_range(0..n_notes as u32) as usize;
                        for (i, bucket) in facts.iter_mut().enumerate() {
                            if i == target || rng.gen::<f64>() < 0.25 {
                                bucket.push(fact_line(criterion, true));
                            }
                        }
                    }
                },
                (Aggregation::Min, Decision::NotMet) => {
                    let target = match config.placement {
                        FactPlacement::Clustered => last,
                        FactPlacement::Scattered => rng.gen_range(0..n_notes as u32) as usize,
                    };
                    facts[target].push(fact_line(criterion, false));
                }
                (Aggregation::MostRecent, Decision::Met) => facts[last].push(fact_line(criterion, true)),
                (Aggregation::MostRecent, Decision::NotMet) if config.out_of_window_distractors => {
                    let months = criterion.window_months.expect("validated");
                    let boundary = reference.checked_sub_months(Months::new(months)).expect("date in range");
                    let outside: Vec<usize> = (0..n_notes).filter(|&i| dates[i] <= boundary).collect();
                    if let Some(&i) = outside.choose(&mut rng) {
                        facts[i].push(fact_line(criterion, true));
                    }
                }
                _ => {}
            }
        }

        let mut notes = Vec::with_capacity(n_notes);
        for (n_idx, (date, note_facts)) in dates.iter().zip(facts).enumerate() {
            let text = compose_note(*date, note_facts, config, &mut rng);
            notes.push(Note {
                note_id: format!("N{:02}", n_idx + 1),
                patient_id: patient_id.clone(),
                date: *date,
                text,
            });
        }
        patients.push(Patient::new(patient_id, notes).with_labels(labels));
    }

    Ok((Corpus::new(patients)?, truth))
}

fn distribute_notes(config: &SyntheticConfig, rng: &mut ChaCha8Rng) -> Vec<usize> {
    match config.total_notes {
        None => (0..config.n_patients)
            .map(|_| rng.gen_range(config.min_notes as u32..=config.max_notes as u32) as usize)
            .collect(),
        Some(total) => {
            let mut counts = vec![config.min_notes; config.n_patients];
            let mut remaining = total - config.n_patients * config.min_notes;
            while remaining > 0 {
                let open: Vec<usize> = (0..counts.len()).filter(|&i| counts[i] < config.max_notes).collect();
                let pick = open[rng.gen_range(0..open.len() as u32) as usize];
                counts[pick] += 1;
                remaining -= 1;
            }
            counts
        }
    }
}

/// Ascending dates; consecutive notes are 0-240 days apart (0 gives same-day ties).
fn note_dates(latest_bound: NaiveDate, n: usize, rng: &mut ChaCha8Rng) -> Vec<NaiveDate> {
    let mut date = latest_bound - Days::new(rng.gen_range(0..=365u64));
    let mut dates = vec![date];
    for _ in 1..n {
        date = date - Days::new(rng.gen_range(0..=240u64));
        dates.push(date);
    }
    dates.reverse();
    dates
}

fn fact_line(criterion: &CriterionSpec, met: bool) -> Vec<String> {
    let sentinel = if met {
        met_sentinel(&criterion.criterion_id)
    } else {
        not_met_sentinel(&criterion.criterion_id)
    };
    let mut tokens: Vec<String> = sentinel.split(' ').map(str::to_string).collect();
    debug_assert_eq!(tokens.len(), SENTINEL_TOKENS);
    tokens.push("Evidence:".into());
    tokens.extend(
        criterion
            .definition
            .split_whitespace()
            .take(EVIDENCE_WORDS)
            .map(str::to_string),
    );
    tokens
}

struct NoteWriter {
    text: String,
    tokens: usize,
    line_words: usize,
}

impl NoteWriter {
    fn push_word(&mut self, word: &str, line_break_after: bool) {
        self.text.push_str(word);
        self.tokens += 1;
        self.line_words += 1;
        if line_break_after {
            self.text.push('\n');
            self.line_words = 0;
        } else {
            self.text.push(' ');
        }
    }

    fn break_line(&mut self) {
        if self.line_words > 0 {
            self.text.pop();
            self.text.push('\n');
            self.line_words = 0;
        }
    }
}

fn compose_note(date: NaiveDate, facts: Vec<Vec<String>>, config: &SyntheticConfig, rng: &mut ChaCha8Rng) -> String {
    let mut w = NoteWriter {
        text: String::new(),
        tokens: 0,
        line_words: 0,
    };
    w.push_word("Record", false);
    w.push_word("date:", false);
    w.push_word(&date.format("%Y-%m-%d").to_string(), true);

    let mut scheduled: Vec<(usize, Vec<String>)> = match config.placement {
        FactPlacement::Clustered => facts.into_iter().map(|f| (0, f)).collect(),
        FactPlacement::Scattered => facts
            .into_iter()
            .map(|f| (rng.gen_range(0..=config.filler_words as u32) as usize, f))
            .collect(),
    };
    scheduled.sort_by_key(|(pos, _)| *pos);
    let mut scheduled = scheduled.into_iter().peekable();

    let mut sentence_left = 0usize;
    let mut emit_filler = |w: &mut NoteWriter, rng: &mut ChaCha8Rng| {
        if sentence_left == 0 {
            sentence_left = rng.gen_range(6..=14u32) as usize;
        }
        let mut word = VOCAB[rng.gen_range(0..VOCAB.len() as u32) as usize].to_string();
        sentence_left -= 1;
        let end = sentence_left == 0;
        if end {
            word.push('.');
        }
        w.push_word(&word, end && rng.gen::<f64>() < 0.3);
    };

    for i in 0..=config.filler_words {
        while scheduled.peek().is_some_and(|(pos, _)| *pos == i) {
            let (_, fact) = scheduled.next().expect("peeked");
            if let Some(window) = config.align_to_window.filter(|&win| win >= SENTINEL_TOKENS) {
                while w.tokens % window > window - SENTINEL_TOKENS {
                    emit_filler(&mut w, rng);
                }
            }
            w.break_line();
            let last = fact.len() - 1;
            for (j, token) in fact.iter().enumerate() {
                w.push_word(token, j == last);
            }
        }
        if i < config.filler_words {
            emit_filler(&mut w, rng);
        }
    }
    w.text.trim_end().to_string()
}
