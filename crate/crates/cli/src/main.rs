mod files;
mod serve;

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use trialmatch_core::aggregation::aggregate_all;
use trialmatch_core::assessment::{AssessmentBackend, PriceSheet, UsageTotals};
use trialmatch_core::corpus::{
    canonical_criteria, generate_synthetic_corpus, load_corpus, load_criteria, write_corpus, Corpus, CorpusFormat,
    CriterionSpec, FactPlacement, GroundTruth, SyntheticConfig,
};
use trialmatch_core::embedding::{EmbeddingBackend, EmbeddingIndex, HashingEmbedder, IndexConfig, RemoteEmbedder};
use trialmatch_core::evaluation::{prevalence_baseline, run_sweep, score, Depth, SweepOptions};
use trialmatch_core::pipeline::{run_pipeline_with_progress, RunConfig, RunInputs};
use trialmatch_core::prompting::{PromptTemplate, SchemaConfig, Strategy, TemplateSet};
use trialmatch_core::tokenize::WhitespaceTokenCounter;
use trialmatch_service::{BackendFactory, BackendSpec, DefaultBackends};

#[derive(Parser)]
#[command(name = "trialmatch", version, about = "Match patients to trial criteria from their clinical notes")]
struct Cli {
    /// More log output (-v info, -vv debug). RUST_LOG overrides.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Inspect or generate corpora.
    #[command(subcommand)]
    Corpus(CorpusCommand),
    /// Build the chunk embedding index.
    #[command(subcommand)]
    Index(IndexCommand),
    /// Assess every patient and write decisions, predictions and usage.
    Match(MatchArgs),
    /// Re-aggregate per-note decisions into patient-level predictions.
    Aggregate(AggregateArgs),
    /// Score predictions against labels.
    Eval(EvalArgs),
    /// Run and score every strategy/k combination.
    Sweep(SweepArgs),
    /// Serve the HTTP API.
    Serve(serve::ServeArgs),
}

#[derive(Subcommand)]
enum CorpusCommand {
    /// Load a corpus and print summary statistics.
    Validate {
        path: PathBuf,
        #[arg(long, default_value = "jsonl", value_parser = parse_format)]
        format: CorpusFormat,
        /// Also check that labels only name known criteria.
        #[arg(long)]
        criteria: Option<PathBuf>,
    },
    /// Generate a labelled synthetic corpus.
    Synth(SynthArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Placement {
    Scattered,
    Clustered,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 10, conflicts_with = "n2c2_shape")]
    patients: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// 86 patients and 377 notes with canonical prevalence.
    #[arg(long)]
    n2c2_shape: bool,
    /// Every criterion MET with probability 0.5.
    #[arg(long, conflicts_with = "n2c2_shape")]
    balanced: bool,
    #[arg(long)]
    min_notes: Option<usize>,
    #[arg(long)]
    max_notes: Option<usize>,
    #[arg(long)]
    total_notes: Option<usize>,
    #[arg(long)]
    filler_words: Option<usize>,
    #[arg(long, value_enum)]
    placement: Option<Placement>,
    /// Keep each fact inside one chunk of this many tokens; 0 disables.
    #[arg(long)]
    align_window: Option<usize>,
    /// Plant MET facts outside the look-back window of NOT MET criteria.
    #[arg(long)]
    distractors: bool,
    #[arg(long)]
    criteria: Option<PathBuf>,
}

#[derive(Subcommand)]
enum IndexCommand {
    /// Chunk and embed every note; write the index file.
    Build {
        #[command(flatten)]
        corpus: CorpusArgs,
        /// `hashing`, `hashing:<dimension>` or `remote:<url>`.
        #[arg(long, default_value = "hashing")]
        backend: String,
        #[arg(long)]
        model: Option<String>,
        #[arg(long, default_value_t = trialmatch_core::embedding::DEFAULT_CHUNK_WINDOW)]
        window: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct CorpusArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long, default_value = "jsonl", value_parser = parse_format)]
    format: CorpusFormat,
    /// Criteria JSON; defaults to the bundled cohort criteria.
    #[arg(long)]
    criteria: Option<PathBuf>,
}

#[derive(Args)]
struct EmbeddingArgs {
    /// `hashing`, `hashing:<dimension>` or `remote:<url>`.
    #[arg(long, default_value = "hashing")]
    embedder: String,
    #[arg(long)]
    embedding_model: Option<String>,
    #[arg(long, default_value_t = trialmatch_core::embedding::DEFAULT_CHUNK_WINDOW)]
    window: usize,
}

#[derive(Args)]
struct BackendArgs {
    /// `oracle` or `remote:<base url>`.
    #[arg(long, default_value = "oracle")]
    backend: String,
    #[arg(long)]
    model: Option<String>,
    /// JSON map of backend id to per-1k-token prices.
    #[arg(long)]
    prices: Option<PathBuf>,
    /// Context window assumed for remote models.
    #[arg(long, default_value_t = 128_000)]
    context_limit: usize,
}

#[derive(Args)]
struct PromptArgs {
    #[arg(long)]
    no_medications: bool,
    #[arg(long)]
    no_rationale: bool,
    #[arg(long)]
    no_confidence: bool,
    /// Worked example placed before the patient records.
    #[arg(long)]
    few_shot: Option<PathBuf>,
    #[arg(long)]
    all_criteria_template: Option<PathBuf>,
    #[arg(long)]
    individual_criteria_template: Option<PathBuf>,
    #[arg(long, default_value_t = 4)]
    max_in_flight: usize,
}

#[derive(Args)]
struct MatchArgs {
    #[command(flatten)]
    corpus: CorpusArgs,
    #[arg(long, value_parser = parse_strategy)]
    strategy: Strategy,
    /// Chunks retrieved per query; `full` (the default) injects whole notes.
    #[arg(long, default_value = "full", value_parser = parse_depth)]
    k: Depth,
    #[command(flatten)]
    prompt: PromptArgs,
    #[command(flatten)]
    backend: BackendArgs,
    #[command(flatten)]
    embedding: EmbeddingArgs,
    /// Reuse or create an index file instead of embedding in memory.
    #[arg(long)]
    index: Option<PathBuf>,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args)]
struct AggregateArgs {
    /// Per-job decisions CSV from `match`.
    #[arg(long)]
    decisions: PathBuf,
    /// Corpus the decisions came from; supplies note dates.
    #[command(flatten)]
    corpus: CorpusArgs,
    /// Predictions CSV; a profiles JSONL with provenance if it ends in `.jsonl`.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    /// Predictions CSV or profiles JSONL.
    #[arg(long, required_unless_present = "baseline_train")]
    pred: Option<PathBuf>,
    /// Labelled corpus.
    #[arg(long)]
    labels: PathBuf,
    #[arg(long, default_value = "jsonl", value_parser = parse_format)]
    labels_format: CorpusFormat,
    #[arg(long)]
    criteria: Option<PathBuf>,
    /// Per-job usage CSV, for efficiency figures.
    #[arg(long)]
    ledger: Option<PathBuf>,
    /// Score the majority-class baseline fitted on this labelled corpus instead.
    #[arg(long, conflicts_with = "pred")]
    baseline_train: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    corpus: CorpusArgs,
    #[arg(long, value_delimiter = ',', default_value = "acan,acin,ican,icin", value_parser = parse_strategy)]
    strategies: Vec<Strategy>,
    #[arg(long, value_delimiter = ',', default_value = "1,3,5,10,full", value_parser = parse_depth)]
    ks: Vec<Depth>,
    #[command(flatten)]
    prompt: PromptArgs,
    #[command(flatten)]
    backend: BackendArgs,
    #[command(flatten)]
    embedding: EmbeddingArgs,
    #[arg(long)]
    index: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

fn parse_format(s: &str) -> Result<CorpusFormat, String> {
    s.parse().map_err(|e| format!("{e}"))
}

fn parse_strategy(s: &str) -> Result<Strategy, String> {
    s.parse()
}

fn parse_depth(s: &str) -> Result<Depth, String> {
    s.parse()
}

fn main() {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    if let Err(e) = run(cli.command) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Corpus(CorpusCommand::Validate { path, format, criteria }) => validate(&path, format, criteria.as_deref()),
        Command::Corpus(CorpusCommand::Synth(args)) => synth(args),
        Command::Index(IndexCommand::Build {
            corpus,
            backend,
            model,
            window,
            out,
        }) => {
            let embedding = EmbeddingArgs {
                embedder: backend,
                embedding_model: model,
                window,
            };
            build_index(corpus, embedding, &out)
        }
        Command::Match(args) => run_match(args),
        Command::Aggregate(args) => aggregate(args),
        Command::Eval(args) => eval(args),
        Command::Sweep(args) => sweep(args),
        Command::Serve(args) => serve::run(args),
    }
}

fn criteria_from(path: Option<&Path>) -> Result<Vec<CriterionSpec>> {
    match path {
        Some(p) => load_criteria(p).with_context(|| format!("loading criteria {}", p.display())),
        None => Ok(canonical_criteria()),
    }
}

impl CorpusArgs {
    fn load(&self) -> Result<(Corpus, Vec<CriterionSpec>)> {
        let corpus = load_corpus(&self.corpus, self.format).with_context(|| format!("loading {}", self.corpus.display()))?;
        Ok((corpus, criteria_from(self.criteria.as_deref())?))
    }
}

fn labels_of(corpus: &Corpus, path: &Path) -> Result<GroundTruth> {
    if !corpus.has_labels() {
        bail!("{} has no labels", path.display());
    }
    Ok(GroundTruth::from_corpus(corpus))
}

impl EmbeddingArgs {
    fn embedder(&self) -> Result<Box<dyn EmbeddingBackend>> {
        if let Some(url) = self.embedder.strip_prefix("remote:") {
            let remote = RemoteEmbedder::connect(url, self.embedding_model.clone(), 8191)
                .with_context(|| format!("connecting to embedding service {url}"))?;
            return Ok(Box::new(remote));
        }
        match self.embedder.split_once(':') {
            None if self.embedder == "hashing" => Ok(Box::new(HashingEmbedder::default())),
            Some(("hashing", dim)) => match dim.parse::<usize>() {
                Ok(d) if d > 0 => Ok(Box::new(HashingEmbedder::new(d))),
                _ => bail!("invalid hashing dimension {dim:?}"),
            },
            _ => bail!("unknown embedder {:?}: expected hashing, hashing:<dim> or remote:<url>", self.embedder),
        }
    }

    fn index_config(&self) -> IndexConfig {
        IndexConfig {
            chunk_window: self.window,
            ..IndexConfig::default()
        }
    }

    /// Loads the index at `cache` when it matches, otherwise builds (and
    /// saves, if a path was given).
    fn index(&self, corpus: &Corpus, criteria: &[CriterionSpec], cache: Option<&Path>) -> Result<EmbeddingIndex> {
        let embedder = self.embedder()?;
        let config = self.index_config();
        let index = match cache {
            Some(path) => EmbeddingIndex::load_or_build(path, corpus, criteria, embedder.as_ref(), &WhitespaceTokenCounter, &config),
            None => EmbeddingIndex::build(corpus, criteria, embedder.as_ref(), &WhitespaceTokenCounter, &config),
        };
        index.context("building embedding index")
    }
}

impl BackendArgs {
    fn create(&self, criteria: &[CriterionSpec]) -> Result<Box<dyn AssessmentBackend>> {
        let mut factory = DefaultBackends::new(criteria.to_vec());
        if let Some(path) = &self.prices {
            factory.prices = PriceSheet::load(path).map_err(anyhow::Error::msg)?;
        }
        factory.remote_context_limit = self.context_limit;
        let spec = BackendSpec {
            backend: self.backend.clone(),
            model: self.model.clone(),
        };
        factory.create(&spec).map_err(anyhow::Error::msg)
    }
}

impl PromptArgs {
    fn templates(&self) -> Result<TemplateSet> {
        let mut set = TemplateSet::default();
        if let Some(p) = &self.all_criteria_template {
            set.all_criteria = PromptTemplate::load(p).with_context(|| format!("loading {}", p.display()))?;
        }
        if let Some(p) = &self.individual_criteria_template {
            set.individual_criteria = PromptTemplate::load(p).with_context(|| format!("loading {}", p.display()))?;
        }
        Ok(set)
    }

    fn run_config(&self, strategy: Strategy, k: Depth) -> Result<RunConfig> {
        let few_shot_example = match &self.few_shot {
            Some(p) => Some(std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?),
            None => None,
        };
        if !(1..=64).contains(&self.max_in_flight) {
            bail!("--max-in-flight must be between 1 and 64");
        }
        let mut config = RunConfig::new(strategy, k.k());
        config.schema = SchemaConfig {
            include_medications: !self.no_medications,
            include_rationale: !self.no_rationale,
            include_confidence: !self.no_confidence,
            few_shot_example,
        };
        config.max_in_flight = self.max_in_flight;
        Ok(config)
    }
}

fn validate(path: &Path, format: CorpusFormat, criteria: Option<&Path>) -> Result<()> {
    let corpus = load_corpus(path, format).with_context(|| format!("loading {}", path.display()))?;
    let notes: Vec<_> = corpus.patients().iter().flat_map(|p| &p.notes).collect();
    let words: usize = notes.iter().map(|n| n.text.split_whitespace().count()).sum();
    println!("patients: {}", corpus.len());
    println!("notes: {}", corpus.note_count());
    if let (Some(first), Some(last)) = (notes.iter().map(|n| n.date).min(), notes.iter().map(|n| n.date).max()) {
        println!("dates: {first} to {last}");
    }
    println!("mean words per note: {:.1}", words as f64 / notes.len().max(1) as f64);
    if corpus.has_labels() {
        let labels = GroundTruth::from_corpus(&corpus);
        println!("labelled pairs: {}", labels.len());
        if let Some(p) = criteria {
            let known = criteria_from(Some(p))?;
            for (patient, criterion, _) in labels.iter() {
                if !known.iter().any(|c| c.criterion_id == criterion) {
                    bail!("patient {patient} has a label for unknown criterion {criterion}");
                }
            }
        }
    } else {
        println!("labelled pairs: 0");
    }
    Ok(())
}

fn synth(args: SynthArgs) -> Result<()> {
    let mut config = if args.n2c2_shape {
        SyntheticConfig::n2c2_test_shape()
    } else if args.balanced {
        SyntheticConfig::balanced(args.patients)
    } else {
        SyntheticConfig {
            n_patients: args.patients,
            ..SyntheticConfig::default()
        }
    };
    if let Some(path) = &args.criteria {
        config.criteria = criteria_from(Some(path))?;
    }
    if let Some(n) = args.min_notes {
        config.min_notes = n;
    }
    if let Some(n) = args.max_notes {
        config.max_notes = n;
    }
    if args.total_notes.is_some() {
        config.total_notes = args.total_notes;
    }
    if let Some(n) = args.filler_words {
        config.filler_words = n;
    }
    if let Some(p) = args.placement {
        config.placement = match p {
            Placement::Scattered => FactPlacement::Scattered,
            Placement::Clustered => FactPlacement::Clustered,
        };
    }
    if let Some(w) = args.align_window {
        config.align_to_window = (w > 0).then_some(w);
    }
    config.out_of_window_distractors = args.distractors;
    let (corpus, _) = generate_synthetic_corpus(&config, args.seed)?;
    write_corpus(&corpus, &args.out).with_context(|| format!("writing {}", args.out.display()))?;
    println!("wrote {} patients, {} notes to {}", corpus.len(), corpus.note_count(), args.out.display());
    Ok(())
}

fn build_index(corpus: CorpusArgs, embedding: EmbeddingArgs, out: &Path) -> Result<()> {
    let (corpus, criteria) = corpus.load()?;
    let index = embedding.index(&corpus, &criteria, None)?;
    index.save(out).with_context(|| format!("writing {}", out.display()))?;
    println!("{}", serde_json::to_string_pretty(&index.header())?);
    Ok(())
}

fn progress_logger(label: String) -> impl Fn(usize, usize) + Sync {
    move |done, total| {
        let step = (total / 10).max(1);
        if done % step == 0 || done == total {
            log::info!("{label}: {done}/{total} jobs");
        }
    }
}

fn run_match(args: MatchArgs) -> Result<()> {
    let (corpus, criteria) = args.corpus.load()?;
    let templates = args.prompt.templates()?;
    let config = args.prompt.run_config(args.strategy, args.k)?;
    let backend = args.backend.create(&criteria)?;
    let index = match args.k {
        Depth::TopK(_) => Some(args.embedding.index(&corpus, &criteria, args.index.as_deref())?),
        Depth::Full => None,
    };
    let inputs = RunInputs {
        corpus: &corpus,
        criteria: &criteria,
        templates: &templates,
        tokenizer: &WhitespaceTokenCounter,
        index: index.as_ref(),
    };
    std::fs::create_dir_all(&args.out_dir).with_context(|| format!("creating {}", args.out_dir.display()))?;
    let ledger_path = args.out_dir.join("ledger.csv");
    let progress = progress_logger(format!("{} k={}", args.strategy, args.k));
    let result = match run_pipeline_with_progress(&inputs, &config, backend.as_ref(), &progress) {
        Ok(r) => r,
        Err(e) => {
            // Calls already made are still billed.
            e.ledger.save_csv(&ledger_path)?;
            bail!("{}: {e}", e.code());
        }
    };
    result.ledger.save_csv(&ledger_path)?;
    files::write_decisions(&args.out_dir.join("decisions.csv"), &result.decisions)?;
    files::write_predictions(&args.out_dir.join("predictions.csv"), &result.profiles)?;
    files::write_jsonl(&args.out_dir.join("profiles.jsonl"), &result.profiles)?;

    let usage = result.ledger.totals();
    let mut summary = serde_json::json!({
        "strategy": args.strategy,
        "k": args.k.to_string(),
        "backend": backend.backend_id(),
        "patients": corpus.len(),
        "jobs": result.jobs.len(),
        "parse_failures": result.parse_failures,
        "usage": usage,
    });
    if corpus.has_labels() {
        let report = score(&result.profiles, &GroundTruth::from_corpus(&corpus), &criteria, usage)?;
        files::write_json(&args.out_dir.join("eval.json"), &report)?;
        summary["macro_f1"] = report.macro_f1.into();
        summary["micro_f1"] = report.micro_f1.into();
    }
    files::write_json(&args.out_dir.join("summary.json"), &summary)?;
    println!("{}", serde_json::to_string_pretty(&summary)?);
    Ok(())
}

fn aggregate(args: AggregateArgs) -> Result<()> {
    let (corpus, criteria) = args.corpus.load()?;
    let decisions = files::read_decisions(&args.decisions)?;
    let profiles = aggregate_all(&decisions, &criteria, &corpus)?;
    if args.out.extension().is_some_and(|e| e == "jsonl") {
        files::write_jsonl(&args.out, &profiles)?;
    } else {
        files::write_predictions(&args.out, &profiles)?;
    }
    println!("aggregated {} decisions for {} patients", decisions.len(), profiles.len());
    Ok(())
}

fn eval(args: EvalArgs) -> Result<()> {
    let criteria = criteria_from(args.criteria.as_deref())?;
    let corpus = load_corpus(&args.labels, args.labels_format).with_context(|| format!("loading {}", args.labels.display()))?;
    let labels = labels_of(&corpus, &args.labels)?;
    let predictions = match (&args.pred, &args.baseline_train) {
        (Some(pred), _) => files::read_predictions(pred)?,
        (None, Some(train)) => {
            let train_corpus = load_corpus(train, args.labels_format).with_context(|| format!("loading {}", train.display()))?;
            let baseline = prevalence_baseline(&labels_of(&train_corpus, train)?, &criteria)?;
            baseline.predict(corpus.patients().iter().map(|p| p.patient_id.as_str()))
        }
        (None, None) => unreachable!("clap requires one of --pred and --baseline-train"),
    };
    let usage = match &args.ledger {
        Some(p) => files::read_usage(p)?,
        None => UsageTotals::default(),
    };
    let report = score(&predictions, &labels, &criteria, usage)?;
    if let Some(out) = &args.out {
        files::write_json(out, &report)?;
    }
    println!("{:<16} {:>9} {:>9} {:>9} {:>9} {:>7}", "criterion", "precision", "recall", "f1", "f1_not", "support");
    for c in &report.per_criterion {
        println!(
            "{:<16} {:>9.4} {:>9.4} {:>9.4} {:>9.4} {:>7}",
            c.criterion_id, c.precision, c.recall, c.f1_met, c.f1_not_met, c.support
        );
    }
    println!("macro_f1 {:.4}  micro_f1 {:.4}", report.macro_f1, report.micro_f1);
    if args.ledger.is_some() {
        println!("{}", serde_json::to_string(&report.efficiency)?);
    }
    Ok(())
}

fn sweep(args: SweepArgs) -> Result<()> {
    let (corpus, criteria) = args.corpus.load()?;
    let labels = labels_of(&corpus, &args.corpus.corpus)?;
    let templates = args.prompt.templates()?;
    let base = args.prompt.run_config(Strategy::Acan, Depth::Full)?;
    let backend = args.backend.create(&criteria)?;
    let index = if args.ks.iter().any(|d| d.k().is_some()) {
        Some(args.embedding.index(&corpus, &criteria, args.index.as_deref())?)
    } else {
        None
    };
    let inputs = RunInputs {
        corpus: &corpus,
        criteria: &criteria,
        templates: &templates,
        tokenizer: &WhitespaceTokenCounter,
        index: index.as_ref(),
    };
    let options = SweepOptions {
        strategies: args.strategies,
        depths: args.ks,
        base,
    };
    let report = run_sweep(&inputs, &labels, &options, backend.as_ref());
    let file = std::fs::File::create(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    report.write_csv(file)?;
    let fmt = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |f| format!("{f:.4}"));
    println!("{:<9} {:>5} {:>10} {:>6} {:>8} {:>8}  status", "strategy", "k", "tokens", "calls", "macro", "micro");
    for row in report.rows() {
        println!(
            "{:<9} {:>5} {:>10} {:>6} {:>8} {:>8}  {}",
            row.strategy.to_string(),
            row.k,
            row.tokens,
            row.calls,
            fmt(row.macro_f1),
            fmt(row.micro_f1),
            row.status
        );
    }
    Ok(())
}
