use chrono::NaiveDate;
use trialmatch_core::corpus::{Aggregation, CriterionSpec, Note, Patient};
use trialmatch_core::prompting::{plan_prompts, PlanOptions, SchemaConfig, Strategy, TemplateSet};
use trialmatch_core::tokenize::WhitespaceTokenCounter;

fn fixture() -> (Patient, Vec<CriterionSpec>) {
    let note = |id: &str, date: (i32, u32, u32), text: &str| Note {
        note_id: id.into(),
        patient_id: "golden".into(),
        date: NaiveDate::from_ymd_opt(date.0, date.1, date.2).unwrap(),
        text: text.into(),
    };
    let patient = Patient::new(
        "golden",
        vec![
            note("r1", (2024, 1, 15), "Record date: 2024-01-15\nHbA1c 7.1% today. Continues metformin 500 mg."),
            note("r2", (2024, 6, 1), "Record date: 2024-06-01\nSeen with interpreter; prefers Spanish."),
        ],
    );
    let criteria = vec![
        CriterionSpec::new("HBA1C", "Any hemoglobin A1c (HbA1c) value between 6.5% and 9.5%.", Aggregation::Max),
        CriterionSpec::new("ENGLISH", "Patient must speak English.", Aggregation::Min),
    ];
    (patient, criteria)
}

fn render(strategy: Strategy, schema: &SchemaConfig) -> Vec<String> {
    let (patient, criteria) = fixture();
    let templates = TemplateSet::default();
    let options = PlanOptions {
        schema,
        templates: &templates,
        tokenizer: &WhitespaceTokenCounter,
        context_limit: None,
        retrieval: None,
    };
    plan_prompts(strategy, &patient, &criteria, &options)
        .unwrap()
        .into_iter()
        .map(|j| j.rendered_text)
        .collect()
}

#[test]
fn default_all_criteria_prompt_matches_snapshot() {
    let rendered = render(Strategy::Acan, &SchemaConfig::default());
    assert_eq!(rendered.len(), 1);
    assert_eq!(rendered[0], include_str!("golden/acan_default.txt"));
}

#[test]
fn individual_prompt_without_rationale_matches_snapshot() {
    let schema = SchemaConfig {
        include_rationale: false,
        ..Default::default()
    };
    let rendered = render(Strategy::Icin, &schema);
    assert_eq!(rendered.len(), 4);
    assert_eq!(rendered[0], include_str!("golden/icin_no_rationale_first.txt"));
    assert!(rendered.iter().all(|r| !r.contains("rationale")));
}
