//! The `confdyn` command line.
//!
//! Each subcommand is also a plain function returning a [`CliError`], so the
//! whole pipeline can be driven from code and tests without a subprocess.
//!
//! Exit codes: 0 success, 1 validation or data failure, 2 usage error,
//! 3 I/O error.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs;
use std::io::{self, BufRead, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::json;
use thiserror::Error;

use crate::confidence::{CocoaSimilarity, Metric, ScoreConfig, ScoreTable};
use crate::dynamics::{self, DynamicsConfig, DynamicsReport, SamplePoint};
use crate::records::{self, CheckpointKey, LoadOptions, LoadedRecords, RecordsError, RunKey, Strictness};
use crate::report::{self, Cell, Metadata, OutputFormat, Table};
use crate::stats::{self, AnovaHypothesis, CorrelationReport};
use crate::synth::{self, DriftModel, SynthSpec};
use crate::textsim::QualityMetric;

pub const EXIT_OK: i32 = 0;
pub const EXIT_INVALID: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_IO: i32 = 3;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Invalid(String),
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Io(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Invalid(_) => EXIT_INVALID,
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Io(_) => EXIT_IO,
        }
    }
}

impl From<RecordsError> for CliError {
    fn from(e: RecordsError) -> Self {
        match e {
            RecordsError::Io { .. } => CliError::Io(e.to_string()),
            other => CliError::Invalid(other.to_string()),
        }
    }
}

impl From<io::Error> for CliError {
    fn from(e: io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

#[derive(Debug, Parser)]
#[command(name = "confdyn", version, about = "Confidence metrics and their correlation with quality across checkpoints")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Check a record file and list violations.
    Validate(ValidateArgs),
    /// Compute confidence and quality columns for every record.
    Score(ScoreArgs),
    /// Per-checkpoint Spearman correlations, seed aggregates, deltas, ANOVA.
    Correlate(CorrelateArgs),
    /// Quadrant and sample-pair dynamics between checkpoints.
    Dynamics(DynamicsArgs),
    /// AUROC of each metric at detecting correct outputs.
    Detect(DetectArgs),
    /// Write synthetic records with known structure.
    Synth(SynthArgs),
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct InputArgs {
    /// Record file (JSONL with a header line).
    #[arg(long)]
    pub input: PathBuf,
    /// Abort on the first invalid record (default).
    #[arg(long, conflicts_with = "lenient")]
    pub strict: bool,
    /// Skip invalid records and report them.
    #[arg(long)]
    pub lenient: bool,
    /// Expected dropout decodes per record; defaults to the file header, then 3.
    #[arg(long)]
    pub n_dropout: Option<usize>,
}

impl InputArgs {
    fn options(&self) -> LoadOptions {
        LoadOptions {
            strictness: if self.lenient { Strictness::Lenient } else { Strictness::Strict },
            n_dropout: self.n_dropout,
        }
    }
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct ScoringArgs {
    /// Metrics to compute (comma separated; default all twelve).
    #[arg(long, value_delimiter = ',', value_parser = parse_metric)]
    pub metrics: Vec<Metric>,
    /// Quality columns (comma separated).
    #[arg(long, value_delimiter = ',', value_parser = parse_quality)]
    pub quality: Vec<QualityMetric>,
    /// Beam index for bs_ratios and bs_sums (default: all beams).
    #[arg(long)]
    pub k: Option<usize>,
    /// Similarity inside the CoCoA metrics.
    #[arg(long, default_value = "chrf_plus", value_parser = parse_cocoa_similarity)]
    pub cocoa_similarity: CocoaSimilarity,
    /// JSONL of training-set embeddings (one array per line), used to derive
    /// train_similarity where records only carry an embedding.
    #[arg(long)]
    pub train_embeddings: Option<PathBuf>,
}

impl ScoringArgs {
    fn config(&self, default_quality: &[QualityMetric]) -> ScoreConfig {
        ScoreConfig {
            metrics: if self.metrics.is_empty() { Metric::ALL.to_vec() } else { dedup(&self.metrics) },
            qualities: if self.quality.is_empty() { default_quality.to_vec() } else { dedup(&self.quality) },
            k: self.k,
            cocoa_similarity: self.cocoa_similarity,
        }
    }
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct OutputArgs {
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value_t = OutputFormat::Csv)]
    pub format: OutputFormat,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct ValidateArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub n_dropout: Option<usize>,
    /// Violations to print.
    #[arg(long, default_value_t = 20)]
    pub max_violations: usize,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct ScoreArgs {
    #[command(flatten)]
    pub input: InputArgs,
    #[command(flatten)]
    pub scoring: ScoringArgs,
    #[command(flatten)]
    pub output: OutputArgs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
#[value(rename_all = "snake_case")]
pub enum AnovaField {
    Epoch,
    NTrainSamples,
    Model,
    Task,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct CorrelateArgs {
    #[command(flatten)]
    pub input: InputArgs,
    #[command(flatten)]
    pub scoring: ScoringArgs,
    #[command(flatten)]
    pub output: OutputArgs,
    /// Group per-checkpoint correlations by this field and test for equal
    /// means (one-way ANOVA, Holm-corrected across metrics).
    #[arg(long, value_enum)]
    pub anova: Option<AnovaField>,
    #[arg(long, default_value_t = 0.05)]
    pub alpha: f64,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct DynamicsArgs {
    #[command(flatten)]
    pub input: InputArgs,
    #[command(flatten)]
    pub scoring: ScoringArgs,
    #[command(flatten)]
    pub output: OutputArgs,
    /// Earlier epoch (default: each run's first).
    #[arg(long)]
    pub from_epoch: Option<u32>,
    /// Later epoch (default: each run's last).
    #[arg(long)]
    pub to_epoch: Option<u32>,
    /// Compare every pair of adjacent epochs instead of first and last.
    #[arg(long, conflicts_with_all = ["from_epoch", "to_epoch"])]
    pub adjacent: bool,
    /// Cap on classified sample pairs; 0 classifies every eligible pair.
    #[arg(long, default_value_t = dynamics::DEFAULT_PAIR_CAP)]
    pub pair_cap: usize,
    /// Seed for pair subsampling.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Also write per-sample (dq, dc) rows.
    #[arg(long)]
    pub per_sample_dump: bool,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct DetectArgs {
    #[command(flatten)]
    pub input: InputArgs,
    #[command(flatten)]
    pub scoring: ScoringArgs,
    #[command(flatten)]
    pub output: OutputArgs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
#[value(rename_all = "snake_case")]
pub enum DriftKind {
    None,
    UniformLogprobInflation,
    QualityCoupled,
    SimilarityCoupled,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    /// JSON spec file; overrides every other generator flag.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    #[arg(long, default_value_t = 100)]
    pub n_samples: usize,
    #[arg(long, default_value_t = 2)]
    pub n_epochs: u32,
    /// Run seeds (comma separated).
    #[arg(long, value_delimiter = ',', default_value = "0")]
    pub seeds: Vec<i64>,
    #[arg(long, default_value_t = 200)]
    pub vocab_size: usize,
    #[arg(long, value_enum, default_value_t = DriftKind::None)]
    pub drift: DriftKind,
    #[arg(long, default_value_t = 0.1)]
    pub epsilon: f64,
    #[arg(long, default_value_t = 1.0)]
    pub beta: f64,
    #[arg(long, default_value_t = 0.5)]
    pub noise_scale: f64,
    /// Generator seed.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

impl SynthArgs {
    pub fn spec(&self) -> Result<SynthSpec, CliError> {
        if let Some(path) = &self.spec {
            let text = fs::read_to_string(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
            return serde_json::from_str(&text).map_err(|e| CliError::Invalid(format!("{}: {e}", path.display())));
        }
        Ok(SynthSpec {
            n_samples: self.n_samples,
            n_epochs: self.n_epochs,
            seeds: self.seeds.clone(),
            vocab_size: self.vocab_size,
            drift: match self.drift {
                DriftKind::None => DriftModel::None,
                DriftKind::UniformLogprobInflation => DriftModel::UniformLogprobInflation { epsilon: self.epsilon },
                DriftKind::QualityCoupled => DriftModel::QualityCoupled,
                DriftKind::SimilarityCoupled => DriftModel::SimilarityCoupled { beta: self.beta },
            },
            noise_scale: self.noise_scale,
            rng_seed: self.seed,
            ..SynthSpec::default()
        })
    }
}

fn parse_metric(s: &str) -> Result<Metric, String> {
    Metric::from_name(s).ok_or_else(|| {
        let names: Vec<&str> = Metric::ALL.iter().map(|m| m.name()).collect();
        format!("unknown metric {s:?}; expected one of {}", names.join(", "))
    })
}

fn parse_quality(s: &str) -> Result<QualityMetric, String> {
    match QualityMetric::from_name(s) {
        Some(QualityMetric::Cosine) => Err("cosine has no text form; it needs embeddings".into()),
        Some(q) => Ok(q),
        None => Err(format!(
            "unknown quality {s:?}; expected chrf_plus, token_f1, exact_match, bleu or meteor_lite"
        )),
    }
}

fn parse_cocoa_similarity(s: &str) -> Result<CocoaSimilarity, String> {
    CocoaSimilarity::from_name(s).ok_or_else(|| format!("unknown similarity {s:?}"))
}

fn dedup<T: PartialEq + Copy>(xs: &[T]) -> Vec<T> {
    let mut out = Vec::new();
    for x in xs {
        if !out.contains(x) {
            out.push(*x);
        }
    }
    out
}

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match dispatch(&cli.command) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn dispatch(command: &Command) -> Result<(), CliError> {
    match command {
        Command::Validate(a) => {
            let summary = cmd_validate(a)?;
            let mut stdout = io::stdout().lock();
            stdout.write_all(summary.text.as_bytes())?;
            if summary.violations > 0 {
                return Err(CliError::Invalid(format!("{} violations", summary.violations)));
            }
            Ok(())
        }
        Command::Score(a) => cmd_score(a).map(report_paths),
        Command::Correlate(a) => cmd_correlate(a).map(report_paths),
        Command::Dynamics(a) => cmd_dynamics(a).map(report_paths),
        Command::Detect(a) => cmd_detect(a).map(report_paths),
        Command::Synth(a) => cmd_synth(a).map(report_paths),
    }
}

fn report_paths(paths: Vec<PathBuf>) {
    for p in paths {
        eprintln!("wrote {}", p.display());
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ValidationSummary {
    pub records: usize,
    pub checkpoints: usize,
    pub violations: usize,
    pub text: String,
}

/// Reads every line and reports all violations; the file is clean iff
/// `violations == 0`.
pub fn cmd_validate(args: &ValidateArgs) -> Result<ValidationSummary, CliError> {
    let loaded = records::load_records(
        &args.input,
        LoadOptions {
            strictness: Strictness::Lenient,
            n_dropout: args.n_dropout,
        },
    )?;
    let checkpoints = records::group_by_checkpoint(loaded.records.clone()).len();
    let mut text = format!(
        "records: {}\ncheckpoints: {}\n{} violations\n",
        loaded.records.len(),
        checkpoints,
        loaded.violations.len()
    );
    for v in loaded.violations.iter().take(args.max_violations) {
        text.push_str(&format!("line {}: {}\n", v.line, v.violation));
    }
    if loaded.violations.len() > args.max_violations {
        text.push_str(&format!("... {} more\n", loaded.violations.len() - args.max_violations));
    }
    Ok(ValidationSummary {
        records: loaded.records.len(),
        checkpoints,
        violations: loaded.violations.len(),
        text,
    })
}

fn load(input: &InputArgs, scoring: &ScoringArgs) -> Result<LoadedRecords, CliError> {
    let mut loaded = records::load_records(&input.input, input.options())?;
    if let Some(path) = &scoring.train_embeddings {
        let training = read_embeddings(path)?;
        dynamics::derive_train_similarity(&mut loaded.records, &training)
            .map_err(|e| CliError::Invalid(e.to_string()))?;
    }
    Ok(loaded)
}

fn read_embeddings(path: &Path) -> Result<Vec<Vec<f64>>, CliError> {
    let file = fs::File::open(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    let mut out = Vec::new();
    for (i, line) in io::BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let v: Vec<f64> = serde_json::from_str(&line)
            .map_err(|e| CliError::Invalid(format!("{} line {}: {e}", path.display(), i + 1)))?;
        out.push(v);
    }
    Ok(out)
}

fn metadata<A: Serialize>(command: &str, args: &A, loaded: &LoadedRecords, config: &ScoreConfig) -> Metadata {
    let mut meta = Metadata::new(
        command,
        json!({
            "args": args,
            "scoring": config,
        }),
    );
    meta.input_header = Some(loaded.header.clone());
    meta.notes = report::scoring_notes(Some(&loaded.header), config);
    for v in &loaded.violations {
        meta.warnings.push(format!("skipped line {}: {}", v.line, v.violation));
    }
    meta
}

fn missing_warnings(table: &ScoreTable, meta: &mut Metadata) {
    for (m, n) in table.missing_counts() {
        if n > 0 {
            meta.warnings.push(format!("{m}: {n} missing cells"));
        }
    }
}

pub fn cmd_score(args: &ScoreArgs) -> Result<Vec<PathBuf>, CliError> {
    let loaded = load(&args.input, &args.scoring)?;
    let config = args.scoring.config(&QualityMetric::REFERENCE_BASED);
    let table = ScoreTable::build(&loaded.records, &config);
    let mut meta = metadata("score", args, &loaded, &config);
    missing_warnings(&table, &mut meta);
    let tables = [report::score_table(&table), report::diagnostics_table(&table)];
    Ok(report::write_outputs(&args.output.out, args.output.format, &meta, &tables)?)
}

fn run_cells(r: &RunKey) -> Vec<Cell> {
    vec![
        r.model_name.as_str().into(),
        r.task_name.as_str().into(),
        r.n_train_samples.into(),
        r.seed.into(),
    ]
}

fn columns(names: &[&str]) -> Vec<String> {
    names.iter().map(|s| s.to_string()).collect()
}

/// Per-checkpoint correlations keyed by run, then epoch.
type RunCorrelations = BTreeMap<RunKey, BTreeMap<u32, Vec<CorrelationReport>>>;

pub fn cmd_correlate(args: &CorrelateArgs) -> Result<Vec<PathBuf>, CliError> {
    if !(args.alpha > 0.0 && args.alpha < 1.0) {
        return Err(CliError::Usage(format!("alpha must be in (0, 1), got {}", args.alpha)));
    }
    let loaded = load(&args.input, &args.scoring)?;
    let config = args.scoring.config(&QualityMetric::REFERENCE_BASED);
    let table = ScoreTable::build(&loaded.records, &config);
    let mut meta = metadata("correlate", args, &loaded, &config);
    missing_warnings(&table, &mut meta);
    meta.notes.push("rho: Spearman with tie-averaged ranks over aligned confidence; metric_ties and quality_ties count values sharing a rank".into());

    let mut reports = Vec::new();
    let mut by_run: RunCorrelations = BTreeMap::new();
    for (key, t) in table.by_checkpoint() {
        for &q in &config.qualities {
            for &m in &config.metrics {
                match stats::correlate_checkpoint(&t, m, q) {
                    Ok(r) => {
                        by_run.entry(key.run()).or_default().entry(key.epoch).or_default().push(r.clone());
                        reports.push(r);
                    }
                    Err(e) => meta.warnings.push(format!("{} {m} vs {}: {e}", key.label(), q.name())),
                }
            }
        }
    }
    if reports.is_empty() {
        return Err(CliError::Invalid("no checkpoint has enough data for a correlation".into()));
    }

    let mut tables = vec![report::correlation_table(&reports)];
    tables.push(aggregate_table(&reports));
    let (deltas, delta_summary) = delta_tables(&by_run);
    tables.push(deltas);
    tables.push(delta_summary);
    tables.push(trajectory_table(&table, &config, &mut meta)?);
    if let Some(field) = args.anova {
        meta.notes.push(format!(
            "significance: one-way ANOVA of per-checkpoint rho grouped by {}, seeds as replicates; Holm correction across metrics within each family; reject when adjusted p <= {}",
            field_name(field),
            args.alpha
        ));
        tables.push(significance(&reports, field, args.alpha, &mut meta)?);
    }
    Ok(report::write_outputs(&args.output.out, args.output.format, &meta, &tables)?)
}

/// Mean and sample standard deviation of rho across seeds.
fn aggregate_table(reports: &[CorrelationReport]) -> Table {
    type Key = (String, String, Option<u64>, u32, String, String);
    let mut groups: BTreeMap<Key, Vec<f64>> = BTreeMap::new();
    for r in reports {
        let k = &r.checkpoint;
        groups
            .entry((
                k.model_name.clone(),
                k.task_name.clone(),
                k.n_train_samples,
                k.epoch,
                r.metric_name.clone(),
                r.quality_name.clone(),
            ))
            .or_default()
            .push(r.rho);
    }
    let mut out = Table::new(
        "aggregated",
        columns(&["model", "task", "n_train_samples", "epoch", "metric", "quality", "rho_mean", "rho_sd", "n_seeds"]),
    );
    for ((model, task, n, epoch, metric, quality), rhos) in groups {
        let (mean, sd) = stats::mean_and_sd(&rhos).expect("group is non-empty");
        out.push(vec![
            model.into(),
            task.into(),
            n.into(),
            epoch.into(),
            metric.into(),
            quality.into(),
            mean.into(),
            sd.into(),
            rhos.len().into(),
        ]);
    }
    out
}

fn rho_of(reports: &[CorrelationReport], metric: &str, quality: &str) -> Option<f64> {
    reports
        .iter()
        .find(|r| r.metric_name == metric && r.quality_name == quality)
        .map(|r| r.rho)
}

/// Correlation change per run: `pre_post` from epoch 0 to the last epoch,
/// `first_post` from the first epoch after 0 to the last. Runs without
/// epoch 0 get only `first_post`, starting at their earliest epoch.
fn delta_tables(by_run: &RunCorrelations) -> (Table, Table) {
    let mut deltas = Table::new(
        "deltas",
        columns(&[
            "model", "task", "n_train_samples", "seed", "metric", "quality", "kind", "epoch_from", "epoch_to",
            "rho_from", "rho_to", "delta",
        ]),
    );
    type Key = (String, String, Option<u64>, String, String, &'static str);
    let mut summary: BTreeMap<Key, Vec<f64>> = BTreeMap::new();
    for (run, epochs) in by_run {
        let list: Vec<u32> = epochs.keys().copied().collect();
        let (Some(&first), Some(&last)) = (list.first(), list.last()) else {
            continue;
        };
        if first == last {
            continue;
        }
        let mut spans: Vec<(&'static str, u32)> = Vec::new();
        if first == 0 {
            spans.push(("pre_post", 0));
            if let Some(&e) = list.iter().find(|e| **e > 0 && **e < last) {
                spans.push(("first_post", e));
            }
        } else {
            spans.push(("first_post", first));
        }
        for r in &epochs[&last] {
            for &(kind, from) in &spans {
                let Some(rho_from) = rho_of(&epochs[&from], &r.metric_name, &r.quality_name) else {
                    continue;
                };
                let delta = r.rho - rho_from;
                let mut row = run_cells(run);
                row.extend([
                    r.metric_name.as_str().into(),
                    r.quality_name.as_str().into(),
                    kind.into(),
                    from.into(),
                    last.into(),
                    rho_from.into(),
                    r.rho.into(),
                    delta.into(),
                ]);
                deltas.push(row);
                summary
                    .entry((
                        run.model_name.clone(),
                        run.task_name.clone(),
                        run.n_train_samples,
                        r.metric_name.clone(),
                        r.quality_name.clone(),
                        kind,
                    ))
                    .or_default()
                    .push(delta);
            }
        }
    }
    let mut out = Table::new(
        "delta_summary",
        columns(&["model", "task", "n_train_samples", "metric", "quality", "kind", "delta_mean", "delta_sd", "n_seeds"]),
    );
    for ((model, task, n, metric, quality, kind), ds) in summary {
        let (mean, sd) = stats::mean_and_sd(&ds).expect("group is non-empty");
        out.push(vec![
            model.into(),
            task.into(),
            n.into(),
            metric.into(),
            quality.into(),
            kind.into(),
            mean.into(),
            sd.into(),
            ds.len().into(),
        ]);
    }
    (deltas, out)
}

fn trajectory_table(table: &ScoreTable, config: &ScoreConfig, meta: &mut Metadata) -> Result<Table, CliError> {
    let mut out = Table::new(
        "trajectories",
        columns(&["model", "task", "n_train_samples", "seed", "metric", "quality", "n_epochs", "missing_epochs", "max_adjacent_drop"]),
    );
    let mut runs: BTreeMap<RunKey, Vec<ScoreTable>> = BTreeMap::new();
    for (key, t) in table.by_checkpoint() {
        runs.entry(key.run()).or_default().push(t);
    }
    for (run, tables) in &runs {
        if tables.len() < 2 {
            continue;
        }
        let refs: Vec<&ScoreTable> = tables.iter().collect();
        for &q in &config.qualities {
            for &m in &config.metrics {
                let traj = dynamics::epoch_trajectory(&refs, m, q).map_err(|e| CliError::Invalid(e.to_string()))?;
                let missing: Vec<String> = traj
                    .points
                    .iter()
                    .filter(|p| p.report.is_none())
                    .map(|p| p.epoch.to_string())
                    .collect();
                if traj.max_adjacent_drop.is_none() && missing.len() == traj.points.len() {
                    continue;
                }
                if !missing.is_empty() {
                    meta.warnings.push(format!(
                        "trajectory {} {m} vs {}: no rho at epochs {}",
                        run_label(run),
                        q.name(),
                        missing.join(";")
                    ));
                }
                let mut row = run_cells(run);
                row.extend([
                    m.name().into(),
                    q.name().into(),
                    traj.points.len().into(),
                    missing.join(";").into(),
                    traj.max_adjacent_drop.into(),
                ]);
                out.push(row);
            }
        }
    }
    Ok(out)
}

fn run_label(r: &RunKey) -> String {
    let mut s = format!("{}/{}/seed={}", r.model_name, r.task_name, r.seed);
    if let Some(n) = r.n_train_samples {
        s.push_str(&format!("/n={n}"));
    }
    s
}

fn field_name(f: AnovaField) -> &'static str {
    match f {
        AnovaField::Epoch => "epoch",
        AnovaField::NTrainSamples => "n_train_samples",
        AnovaField::Model => "model",
        AnovaField::Task => "task",
    }
}

fn field_value(k: &CheckpointKey, f: AnovaField) -> String {
    match f {
        AnovaField::Epoch => k.epoch.to_string(),
        AnovaField::NTrainSamples => k.n_train_samples.map_or("none".into(), |n| n.to_string()),
        AnovaField::Model => k.model_name.clone(),
        AnovaField::Task => k.task_name.clone(),
    }
}

/// Every key field except the grouping field and the seed.
fn family_context(k: &CheckpointKey, f: AnovaField) -> String {
    let mut parts = Vec::new();
    if f != AnovaField::Model {
        parts.push(format!("model={}", k.model_name));
    }
    if f != AnovaField::Task {
        parts.push(format!("task={}", k.task_name));
    }
    if f != AnovaField::NTrainSamples {
        if let Some(n) = k.n_train_samples {
            parts.push(format!("n={n}"));
        }
    }
    if f != AnovaField::Epoch {
        parts.push(format!("epoch={}", k.epoch));
    }
    parts.join("/")
}

fn significance(
    reports: &[CorrelationReport],
    field: AnovaField,
    alpha: f64,
    meta: &mut Metadata,
) -> Result<Table, CliError> {
    // family (context + quality) -> metric -> group value -> rhos
    type Groups = BTreeMap<String, Vec<f64>>;
    let mut families: BTreeMap<String, BTreeMap<String, Groups>> = BTreeMap::new();
    for r in reports {
        let family = format!("{} quality={}", family_context(&r.checkpoint, field), r.quality_name);
        families
            .entry(family)
            .or_default()
            .entry(r.metric_name.clone())
            .or_default()
            .entry(field_value(&r.checkpoint, field))
            .or_default()
            .push(r.rho);
    }
    let mut rows = Vec::new();
    for (family, metrics) in families {
        let mut hypotheses = Vec::new();
        for (metric, groups) in metrics {
            let groups: Vec<Vec<f64>> = groups.into_values().collect();
            match stats::one_way_anova(&groups) {
                Ok(_) => hypotheses.push(AnovaHypothesis { label: metric, groups }),
                Err(e) => meta.warnings.push(format!("anova {family} {metric}: {e}")),
            }
        }
        if hypotheses.is_empty() {
            continue;
        }
        let results = stats::anova_holm(&hypotheses, alpha).map_err(|e| CliError::Invalid(e.to_string()))?;
        rows.extend(results.into_iter().map(|r| (family.clone(), r)));
    }
    Ok(report::significance_table(field_name(field), &rows))
}

pub fn cmd_dynamics(args: &DynamicsArgs) -> Result<Vec<PathBuf>, CliError> {
    let loaded = load(&args.input, &args.scoring)?;
    if args.scoring.quality.len() > 1 {
        return Err(CliError::Usage("dynamics takes a single --quality".into()));
    }
    let config = args.scoring.config(&[QualityMetric::ChrfPlus]);
    let quality = config.qualities[0];
    let table = ScoreTable::build(&loaded.records, &config);
    let mut meta = metadata("dynamics", args, &loaded, &config);
    missing_warnings(&table, &mut meta);
    let cap = (args.pair_cap > 0).then_some(args.pair_cap);
    meta.notes.push(match cap {
        Some(c) => format!("pairs: uniform sample of at most {c} eligible pairs, seed {}", args.seed),
        None => "pairs: every eligible pair classified".into(),
    });
    meta.notes.push("quadrants: a zero delta on either axis counts as concordant; zero_delta counts those samples".into());
    meta.notes.push("pairs: eligible when quality and confidence are strictly ordered the same way at the earlier epoch; a tie at the later epoch counts as a flip".into());
    meta.notes.push("conf_up_*: samples whose aligned confidence rose, split by quality delta under both conventions (improved = dq > 0, not_worse = dq >= 0)".into());
    let dyn_config = DynamicsConfig {
        pair_cap: cap,
        seed: args.seed,
    };

    let mut runs: BTreeMap<RunKey, BTreeMap<u32, ScoreTable>> = BTreeMap::new();
    for (key, t) in table.by_checkpoint() {
        runs.entry(key.run()).or_default().insert(key.epoch, t);
    }
    let mut reports: Vec<DynamicsReport> = Vec::new();
    let mut dumps: Vec<(CheckpointKey, CheckpointKey, String, Vec<SamplePoint>)> = Vec::new();
    for (run, epochs) in &runs {
        let list: Vec<u32> = epochs.keys().copied().collect();
        let spans: Vec<(u32, u32)> = if args.adjacent {
            list.windows(2).map(|w| (w[0], w[1])).collect()
        } else {
            let from = args.from_epoch.unwrap_or(list[0]);
            let to = args.to_epoch.unwrap_or(*list.last().expect("non-empty"));
            for e in [from, to] {
                if !epochs.contains_key(&e) {
                    return Err(CliError::Invalid(format!("run {} has no epoch {e} to pair", run_label(run))));
                }
            }
            if from == to {
                return Err(CliError::Invalid(format!(
                    "run {} needs two distinct epochs, has only {from}",
                    run_label(run)
                )));
            }
            vec![(from, to)]
        };
        if spans.is_empty() {
            return Err(CliError::Invalid(format!("run {} has a single epoch", run_label(run))));
        }
        for (from, to) in spans {
            for &m in &config.metrics {
                match dynamics::dynamics_report(&epochs[&from], &epochs[&to], m, quality, &dyn_config) {
                    Ok((r, points)) => {
                        if args.per_sample_dump {
                            dumps.push((r.checkpoint_from.clone(), r.checkpoint_to.clone(), m.name().into(), points));
                        }
                        reports.push(r);
                    }
                    Err(e) => meta.warnings.push(format!("{} {from}->{to} {m}: {e}", run_label(run))),
                }
            }
        }
    }
    if reports.is_empty() {
        return Err(CliError::Invalid("no metric had paired evidence at both epochs".into()));
    }
    let mut tables = vec![report::dynamics_table(&reports)];
    if args.per_sample_dump {
        tables.push(report::sample_points_table(&dumps));
    }
    Ok(report::write_outputs(&args.output.out, args.output.format, &meta, &tables)?)
}

pub fn cmd_detect(args: &DetectArgs) -> Result<Vec<PathBuf>, CliError> {
    let loaded = load(&args.input, &args.scoring)?;
    if let Some(r) = loaded.records.iter().find(|r| r.correctness_label.is_none()) {
        return Err(CliError::Invalid(format!(
            "record {} at {} has no correctness_label",
            r.sample_id,
            r.checkpoint.label()
        )));
    }
    let mut config = args.scoring.config(&[]);
    config.qualities = args.scoring.quality.clone();
    let table = ScoreTable::build(&loaded.records, &config);
    let mut meta = metadata("detect", args, &loaded, &config);
    missing_warnings(&table, &mut meta);
    meta.notes.push("auroc: aligned confidence rescaled to [0, 1] per checkpoint and metric, correct outputs as positives, ties count one half".into());

    let mut rows = Vec::new();
    let mut by_run: BTreeMap<RunKey, BTreeMap<u32, BTreeMap<String, f64>>> = BTreeMap::new();
    for (key, t) in table.by_checkpoint() {
        for (i, &m) in config.metrics.iter().enumerate() {
            let (scores, labels): (Vec<f64>, Vec<bool>) = t
                .rows
                .iter()
                .filter_map(|r| Some((m.align(r.metrics[i]?), r.correctness_label?)))
                .unzip();
            match stats::detect(m.name(), &scores, &labels) {
                Ok(d) => {
                    by_run
                        .entry(key.run())
                        .or_default()
                        .entry(key.epoch)
                        .or_default()
                        .insert(m.name().into(), d.auroc);
                    rows.push((key.clone(), d));
                }
                Err(e) => meta.warnings.push(format!("{} {m}: {e}", key.label())),
            }
        }
    }
    if rows.is_empty() {
        return Err(CliError::Invalid("no checkpoint has both correct and incorrect outputs".into()));
    }
    let mut change = Table::new(
        "detection_change",
        columns(&[
            "model", "task", "n_train_samples", "seed", "metric", "epoch_from", "epoch_to", "auroc_from", "auroc_to",
            "delta", "direction",
        ]),
    );
    for (run, epochs) in &by_run {
        let (Some((&first, a)), Some((&last, b))) = (epochs.iter().next(), epochs.iter().next_back()) else {
            continue;
        };
        if first == last {
            continue;
        }
        for m in &config.metrics {
            let (Some(x), Some(y)) = (a.get(m.name()), b.get(m.name())) else {
                continue;
            };
            let delta = y - x;
            let direction = if delta > 0.0 {
                "up"
            } else if delta < 0.0 {
                "down"
            } else {
                "same"
            };
            let mut row = run_cells(run);
            row.extend([
                m.name().into(),
                first.into(),
                last.into(),
                (*x).into(),
                (*y).into(),
                delta.into(),
                direction.into(),
            ]);
            change.push(row);
        }
    }
    let tables = [report::detection_table(&rows), change];
    Ok(report::write_outputs(&args.output.out, args.output.format, &meta, &tables)?)
}

/// Writes `records.jsonl` and `truth.json` into `--out`.
pub fn cmd_synth(args: &SynthArgs) -> Result<Vec<PathBuf>, CliError> {
    let spec = args.spec()?;
    let out = synth::generate(&spec).map_err(|e| CliError::Usage(e.to_string()))?;
    fs::create_dir_all(&args.out)?;
    let records_path = args.out.join("records.jsonl");
    let file = fs::File::create(&records_path)?;
    records::write_records(io::BufWriter::new(file), &out.header, &out.records)?;
    let truth_path = args.out.join("truth.json");
    let truth = serde_json::to_value(&out.truth).map_err(|e| CliError::Invalid(e.to_string()))?;
    report::write_json(&truth_path, &truth)?;
    Ok(vec![records_path, truth_path])
}
