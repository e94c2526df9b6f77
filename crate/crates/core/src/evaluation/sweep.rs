use std::fmt;
use std::io::Write;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{score, EvalReport};
use crate::assessment::{AssessmentBackend, UsageTotals};
use crate::corpus::GroundTruth;
use crate::pipeline::{run_pipeline, RunConfig, RunInputs};
use crate::prompting::Strategy;

/// Retrieval depth of a sweep cell.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Depth {
    TopK(usize),
    Full,
}

impl Depth {
    pub fn k(self) -> Option<usize> {
        match self {
            Depth::TopK(k) => Some(k),
            Depth::Full => None,
        }
    }
}

impl fmt::Display for Depth {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Depth::TopK(k) => write!(f, "{k}"),
            Depth::Full => f.write_str("full"),
        }
    }
}

impl FromStr for Depth {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim();
        if s.eq_ignore_ascii_case("full") {
            return Ok(Depth::Full);
        }
        match s.parse::<usize>() {
            Ok(k) if k > 0 => Ok(Depth::TopK(k)),
            _ => Err(format!("invalid k {s:?}: expected a positive integer or \"full\"")),
        }
    }
}

pub struct SweepOptions {
    pub strategies: Vec<Strategy>,
    pub depths: Vec<Depth>,
    /// Schema, assessment and concurrency settings shared by every cell;
    /// its strategy and k are overridden per cell.
    pub base: RunConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub strategy: Strategy,
    pub depth: Depth,
    /// `"ok"` or the failure's error code.
    pub status: String,
    pub error: Option<String>,
    pub report: Option<EvalReport>,
    pub usage: UsageTotals,
}

/// One line of the sweep CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub strategy: Strategy,
    pub k: String,
    pub tokens: u64,
    pub prompt_tokens: u64,
    pub cost: f64,
    pub calls: u64,
    pub macro_f1: Option<f64>,
    pub micro_f1: Option<f64>,
    pub status: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub cells: Vec<SweepCell>,
}

impl SweepReport {
    pub fn rows(&self) -> Vec<SweepRow> {
        self.cells
            .iter()
            .map(|c| SweepRow {
                strategy: c.strategy,
                k: c.depth.to_string(),
                tokens: c.usage.tokens(),
                prompt_tokens: c.usage.prompt_tokens,
                cost: c.usage.cost,
                calls: c.usage.api_calls,
                macro_f1: c.report.as_ref().map(|r| r.macro_f1),
                micro_f1: c.report.as_ref().map(|r| r.micro_f1),
                status: c.status.clone(),
            })
            .collect()
    }

    /// Columns: strategy, k, tokens, prompt_tokens, cost, calls, macro_f1,
    /// micro_f1, status. Scores are empty for failed cells.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<(), csv::Error> {
        let mut w = csv::Writer::from_writer(writer);
        for row in self.rows() {
            w.serialize(row)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn cell(&self, strategy: Strategy, depth: Depth) -> Option<&SweepCell> {
        self.cells.iter().find(|c| c.strategy == strategy && c.depth == depth)
    }
}

/// Runs every (strategy, depth) cell in sequence, each with its own ledger.
/// Failed cells are kept with their partial usage.
pub fn run_sweep(inputs: &RunInputs<'_>, labels: &GroundTruth, options: &SweepOptions, backend: &dyn AssessmentBackend) -> SweepReport {
    let mut cells = Vec::new();
    for &strategy in &options.strategies {
        for &depth in &options.depths {
            let config = RunConfig {
                strategy,
                k: depth.k(),
                ..options.base.clone()
            };
            let cell = match run_pipeline(inputs, &config, backend) {
                Ok(result) => {
                    let usage = result.ledger.totals();
                    match score(&result.profiles, labels, inputs.criteria, usage) {
                        Ok(report) => SweepCell {
                            strategy,
                            depth,
                            status: "ok".into(),
                            error: None,
                            report: Some(report),
                            usage,
                        },
                        Err(e) => SweepCell {
                            strategy,
                            depth,
                            status: e.code().into(),
                            error: Some(e.to_string()),
                            report: None,
                            usage,
                        },
                    }
                }
                Err(e) => {
                    log::warn!("sweep cell {strategy} k={depth} failed: {e}");
                    SweepCell {
                        strategy,
                        depth,
                        status: e.code().into(),
                        error: Some(e.to_string()),
                        report: None,
                        usage: e.ledger.totals(),
                    }
                }
            };
            cells.push(cell);
        }
    }
    SweepReport { cells }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::assessment::OracleBackend;
    use crate::corpus::{canonical_criteria, generate_synthetic_corpus, SyntheticConfig};
    use crate::embedding::{EmbeddingIndex, HashingEmbedder, IndexConfig};
    use crate::prompting::TemplateSet;
    use crate::tokenize::WhitespaceTokenCounter;

    #[test]
    fn depth_parsing() {
        assert_eq!("FULL".parse::<Depth>().unwrap(), Depth::Full);
        assert_eq!(" 3".parse::<Depth>().unwrap(), Depth::TopK(3));
        assert!("0".parse::<Depth>().is_err());
        assert!("x".parse::<Depth>().is_err());
    }

    #[test]
    fn grid_rows_and_failed_cells() {
        let (corpus, truth) = generate_synthetic_corpus(&SyntheticConfig::balanced(30), 9).unwrap();
        for c in &canonical_criteria() {
            let met = corpus.patients().iter().filter(|p| truth.get(&p.patient_id, &c.criterion_id).unwrap().is_met()).count();
            assert!(met > 0 && met < 30, "{} needs both classes", c.criterion_id);
        }
        let criteria = canonical_criteria();
        let templates = TemplateSet::default();
        let index = EmbeddingIndex::build(
            &corpus,
            &criteria,
            &HashingEmbedder::default(),
            &WhitespaceTokenCounter,
            &IndexConfig::default(),
        )
        .unwrap();
        let mut inputs = RunInputs {
            corpus: &corpus,
            criteria: &criteria,
            templates: &templates,
            tokenizer: &WhitespaceTokenCounter,
            index: Some(&index),
        };
        let options = SweepOptions {
            strategies: vec![Strategy::Ican],
            depths: ["1", "3", "5", "10", "full"].iter().map(|s| s.parse().unwrap()).collect(),
            base: RunConfig::new(Strategy::Ican, None),
        };
        let oracle = OracleBackend::new(&criteria);
        let report = run_sweep(&inputs, &truth, &options, &oracle);
        assert_eq!(report.rows().len(), 5);
        let full = report.cell(Strategy::Ican, Depth::Full).unwrap().report.as_ref().unwrap();
        assert_eq!((full.macro_f1, full.micro_f1), (1.0, 1.0));

        let mut csv = Vec::new();
        report.write_csv(&mut csv).unwrap();
        let text = String::from_utf8(csv).unwrap();
        assert_eq!(
            text.lines().next().unwrap(),
            "strategy,k,tokens,prompt_tokens,cost,calls,macro_f1,micro_f1,status"
        );

        inputs.index = None;
        let report = run_sweep(&inputs, &truth, &options, &oracle);
        assert_eq!(report.cells.len(), 5);
        assert_eq!(report.cell(Strategy::Ican, Depth::TopK(3)).unwrap().status, "INDEX_REQUIRED");
        assert_eq!(report.cell(Strategy::Ican, Depth::Full).unwrap().status, "ok");
    }
}
