//! Aggregation checked against a separately written reference on the full
//! 13-criterion policy table.

use chrono::{Datelike, NaiveDate};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use trialmatch_core::aggregation::aggregate_patient;
use trialmatch_core::assessment::CriterionDecision;
use trialmatch_core::corpus::{
    canonical_criteria, generate_synthetic_corpus, Aggregation, Decision, Patient, SyntheticConfig,
};

fn days_in_month(year: i32, month: u32) -> u32 {
    let leap = (year % 4 == 0 && year % 100 != 0) || year % 400 == 0;
    [31, if leap { 29 } else { 28 }, 31, 30, 31, 30, 31, 31, 30, 31, 30, 31][month as usize - 1]
}

/// Month subtraction by hand: step back, clamp the day.
fn months_back(d: NaiveDate, months: u32) -> NaiveDate {
    let total = d.year() * 12 + d.month0() as i32 - months as i32;
    let (y, m) = (total.div_euclid(12), total.rem_euclid(12) as u32 + 1);
    NaiveDate::from_ymd_opt(y, m, d.day().min(days_in_month(y, m))).unwrap()
}

fn reference_decision(items: &[(NaiveDate, bool)], aggregation: Aggregation, window: Option<u32>, reference: NaiveDate) -> bool {
    match aggregation {
        Aggregation::Max => items.iter().any(|x| x.1),
        Aggregation::Min => !items.is_empty() && items.iter().all(|x| x.1),
        Aggregation::MostRecent => {
            let lo = months_back(reference, window.unwrap());
            let mut best: Option<(NaiveDate, bool)> = None;
            for &(d, met) in items {
                if d <= lo || d > reference {
                    continue;
                }
                best = match best {
                    None => Some((d, met)),
                    Some((bd, _)) if d > bd => Some((d, met)),
                    Some((bd, bm)) if d == bd => Some((bd, bm || met)),
                    keep => keep,
                };
            }
            best.is_some_and(|b| b.1)
        }
    }
}

fn random_decisions(patient: &Patient, rng: &mut ChaCha8Rng) -> Vec<CriterionDecision> {
    let mut out = Vec::new();
    for c in canonical_criteria() {
        for note in &patient.notes {
            // Some notes produce no decision, some produce two.
            for _ in 0..rng.gen_range(0..3) {
                out.push(CriterionDecision {
                    job_id: format!("j{}", out.len()),
                    patient_id: patient.patient_id.clone(),
                    criterion_id: c.criterion_id.clone(),
                    note_id: Some(note.note_id.clone()),
                    note_date: Some(note.date),
                    decision: Decision::from_bool(rng.gen_bool(0.4)),
                    medications: None,
                    rationale: None,
                    confidence: None,
                    error: None,
                });
            }
        }
    }
    out
}

#[test]
fn policy_table_matches_reference_on_1000_patients() {
    let config = SyntheticConfig {
        n_patients: 1000,
        min_notes: 1,
        max_notes: 8,
        filler_words: 5,
        align_to_window: None,
        ..Default::default()
    };
    let (corpus, _) = generate_synthetic_corpus(&config, 2024).unwrap();
    let criteria = canonical_criteria();
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut window_hits = 0;
    for patient in corpus.patients() {
        let decisions = random_decisions(patient, &mut rng);
        let profile = aggregate_patient(&decisions, &criteria, patient).unwrap();
        let reference = patient.notes.iter().map(|n| n.date).max().unwrap();
        for c in &criteria {
            let items: Vec<(NaiveDate, bool)> = decisions
                .iter()
                .filter(|d| d.criterion_id == c.criterion_id)
                .map(|d| (d.note_date.unwrap(), d.decision.is_met()))
                .collect();
            let expected = reference_decision(&items, c.aggregation, c.window_months, reference);
            assert_eq!(profile.decisions[&c.criterion_id].is_met(), expected, "{} {}", patient.patient_id, c.criterion_id);
            assert_eq!(profile.provenance[&c.criterion_id].len(), items.len());
            if c.aggregation == Aggregation::MostRecent && items.iter().any(|(d, _)| *d <= months_back(reference, c.window_months.unwrap())) {
                window_hits += 1;
            }
        }
    }
    assert!(window_hits > 100, "out-of-window entries exercised only {window_hits} times");
}

#[test]
fn reference_month_arithmetic() {
    let d = |s: &str| NaiveDate::parse_from_str(s, "%Y-%m-%d").unwrap();
    assert_eq!(months_back(d("2024-06-01"), 2), d("2024-04-01"));
    assert_eq!(months_back(d("2024-03-31"), 1), d("2024-02-29"));
    assert_eq!(months_back(d("2024-01-15"), 12), d("2023-01-15"));
    assert_eq!(months_back(d("2024-02-10"), 3), d("2023-11-10"));
}
