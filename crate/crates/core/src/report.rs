//! Report files: named tables written as CSV (plus a `metadata.json`
//! sidecar) or as one JSON document with an embedded metadata block.
//!
//! Output is a pure function of the tables and metadata: no timestamps, no
//! hash-ordered maps, floats in shortest round-trip form.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::confidence::{Metric, MetricSpec, ScoreConfig, ScoreTable, IMP_WT_TOP_BEAMS};
use crate::dynamics::{DynamicsReport, PairCase, SamplePoint};
use crate::records::{CheckpointKey, FileHeader};
use crate::stats::{CorrelationReport, DetectionReport, SignificanceReport};
use crate::textsim;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum OutputFormat {
    #[default]
    Csv,
    Json,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Cell {
    Str(String),
    Int(i64),
    Num(Option<f64>),
    Bool(Option<bool>),
}

impl Cell {
    fn csv(&self) -> String {
        match self {
            Cell::Str(s) => s.clone(),
            Cell::Int(i) => i.to_string(),
            Cell::Num(Some(x)) if x.is_finite() => x.to_string(),
            Cell::Num(_) => String::new(),
            Cell::Bool(Some(b)) => b.to_string(),
            Cell::Bool(None) => String::new(),
        }
    }

    fn json(&self) -> Value {
        match self {
            Cell::Str(s) => Value::String(s.clone()),
            Cell::Int(i) => json!(i),
            Cell::Num(Some(x)) if x.is_finite() => json!(x),
            Cell::Num(_) | Cell::Bool(None) => Value::Null,
            Cell::Bool(Some(b)) => json!(b),
        }
    }
}

impl From<&str> for Cell {
    fn from(s: &str) -> Self {
        Cell::Str(s.to_string())
    }
}

impl From<String> for Cell {
    fn from(s: String) -> Self {
        Cell::Str(s)
    }
}

impl From<f64> for Cell {
    fn from(x: f64) -> Self {
        Cell::Num(Some(x))
    }
}

impl From<Option<f64>> for Cell {
    fn from(x: Option<f64>) -> Self {
        Cell::Num(x)
    }
}

impl From<usize> for Cell {
    fn from(i: usize) -> Self {
        Cell::Int(i as i64)
    }
}

impl From<u64> for Cell {
    fn from(i: u64) -> Self {
        Cell::Int(i as i64)
    }
}

impl From<i64> for Cell {
    fn from(i: i64) -> Self {
        Cell::Int(i)
    }
}

impl From<u32> for Cell {
    fn from(i: u32) -> Self {
        Cell::Int(i as i64)
    }
}

impl From<bool> for Cell {
    fn from(b: bool) -> Self {
        Cell::Bool(Some(b))
    }
}

impl From<Option<bool>> for Cell {
    fn from(b: Option<bool>) -> Self {
        Cell::Bool(b)
    }
}

impl From<Option<u64>> for Cell {
    fn from(i: Option<u64>) -> Self {
        i.map_or(Cell::Num(None), |i| Cell::Int(i as i64))
    }
}

/// A named rectangular table.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub name: String,
    pub columns: Vec<String>,
    pub rows: Vec<Vec<Cell>>,
}

impl Table {
    pub fn new<S: Into<String>>(name: &str, columns: impl IntoIterator<Item = S>) -> Self {
        Self {
            name: name.to_string(),
            columns: columns.into_iter().map(Into::into).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<Cell>) {
        assert_eq!(row.len(), self.columns.len(), "row width for table {}", self.name);
        self.rows.push(row);
    }

    pub fn column(&self, name: &str) -> Option<usize> {
        self.columns.iter().position(|c| c == name)
    }

    pub fn to_json(&self) -> Value {
        Value::Array(
            self.rows
                .iter()
                .map(|row| {
                    let obj: serde_json::Map<String, Value> = self
                        .columns
                        .iter()
                        .zip(row)
                        .map(|(c, v)| (c.clone(), v.json()))
                        .collect();
                    Value::Object(obj)
                })
                .collect(),
        )
    }

    pub fn write_csv<W: io::Write>(&self, out: W) -> io::Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(&self.columns)?;
        for row in &self.rows {
            w.write_record(row.iter().map(Cell::csv))?;
        }
        w.flush()
    }
}

/// Everything needed to reproduce an output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metadata {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub config: Value,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub input_header: Option<FileHeader>,
    pub quality_parameters: Value,
    pub orientations: Vec<MetricSpec>,
    pub notes: Vec<String>,
    pub warnings: Vec<String>,
}

impl Metadata {
    pub fn new(command: &str, config: Value) -> Self {
        Self {
            tool: env!("CARGO_PKG_NAME").to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            command: command.to_string(),
            config,
            input_header: None,
            quality_parameters: textsim::parameters(),
            orientations: Metric::ALL.iter().map(|m| m.spec()).collect(),
            notes: Vec::new(),
            warnings: Vec::new(),
        }
    }
}

/// Notes on how metric values were computed from the stored evidence.
pub fn scoring_notes(header: Option<&FileHeader>, config: &ScoreConfig) -> Vec<String> {
    let mut notes = vec![
        "aligned values: metrics where higher means less confident are negated before correlation, dynamics and detection".to_string(),
        format!("bs_imp_wt: softmax weights over the top {IMP_WT_TOP_BEAMS} beams' length-normalized log-probabilities"),
        match config.k {
            Some(k) => format!("bs_ratios, bs_sums: k = {k}"),
            None => "bs_ratios, bs_sums: k = number of beams in each record".to_string(),
        },
        format!(
            "cocoa_*: base uncertainty times mean (1 - {}) between hypothesis and dropout decodes",
            config.cocoa_similarity.name()
        ),
    ];
    match header.and_then(|h| h.distribution_top_k) {
        Some(k) => notes.push(format!(
            "do_kl_div: aligned distributions truncated to top {k} by the exporter and renormalized on load; divergences are computed over the stored support"
        )),
        None => notes.push("do_kl_div: computed over the stored support of each aligned distribution".to_string()),
    }
    notes
}

/// Writes `tables` into `out_dir`. CSV writes one file per table and
/// `metadata.json`; JSON writes `<command>.json`. Returns the paths written.
pub fn write_outputs(
    out_dir: &Path,
    format: OutputFormat,
    metadata: &Metadata,
    tables: &[Table],
) -> io::Result<Vec<PathBuf>> {
    fs::create_dir_all(out_dir)?;
    let mut written = Vec::new();
    match format {
        OutputFormat::Csv => {
            for t in tables {
                let path = out_dir.join(format!("{}.csv", t.name));
                t.write_csv(fs::File::create(&path)?)?;
                written.push(path);
            }
            let path = out_dir.join("metadata.json");
            write_json(&path, &serde_json::to_value(metadata)?)?;
            written.push(path);
        }
        OutputFormat::Json => {
            let mut doc = serde_json::Map::new();
            doc.insert("metadata".into(), serde_json::to_value(metadata)?);
            for t in tables {
                doc.insert(t.name.clone(), t.to_json());
            }
            let path = out_dir.join(format!("{}.json", metadata.command));
            write_json(&path, &Value::Object(doc))?;
            written.push(path);
        }
    }
    Ok(written)
}

pub fn write_json(path: &Path, value: &Value) -> io::Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)
}

const KEY_COLUMNS: [&str; 5] = ["model", "task", "n_train_samples", "seed", "epoch"];

fn key_cells(k: &CheckpointKey) -> Vec<Cell> {
    vec![
        k.model_name.as_str().into(),
        k.task_name.as_str().into(),
        k.n_train_samples.into(),
        k.seed.into(),
        k.epoch.into(),
    ]
}

fn with_key(extra: &[&str]) -> Vec<String> {
    KEY_COLUMNS.iter().chain(extra).map(|s| s.to_string()).collect()
}

/// One row per record: key, sample id, metric columns, quality columns.
pub fn score_table(t: &ScoreTable) -> Table {
    let mut columns = with_key(&["sample_id"]);
    columns.extend(t.metrics.iter().map(|m| m.name().to_string()));
    columns.extend(t.qualities.iter().map(|q| q.name().to_string()));
    columns.push("correctness_label".into());
    columns.push("train_similarity".into());
    let mut out = Table::new("scores", columns);
    for r in &t.rows {
        let mut row = key_cells(&r.checkpoint);
        row.push(r.sample_id.as_str().into());
        row.extend(r.metrics.iter().map(|v| Cell::Num(*v)));
        row.extend(r.qualities.iter().map(|v| Cell::Num(*v)));
        row.push(r.correctness_label.into());
        row.push(r.train_similarity.into());
        out.push(row);
    }
    out
}

pub fn diagnostics_table(t: &ScoreTable) -> Table {
    let mut out = Table::new("diagnostics", ["checkpoint", "sample_id", "column", "message"]);
    for d in &t.diagnostics {
        out.push(vec![
            d.checkpoint.as_str().into(),
            d.sample_id.as_str().into(),
            d.column.as_str().into(),
            d.message.as_str().into(),
        ]);
    }
    out
}

pub fn correlation_table(reports: &[CorrelationReport]) -> Table {
    let mut out = Table::new(
        "correlations",
        with_key(&["metric", "quality", "rho", "n", "metric_ties", "quality_ties"]),
    );
    for r in reports {
        let mut row = key_cells(&r.checkpoint);
        row.extend([
            r.metric_name.as_str().into(),
            r.quality_name.as_str().into(),
            r.rho.into(),
            r.n.into(),
            r.metric_ties.into(),
            r.quality_ties.into(),
        ]);
        out.push(row);
    }
    out
}

pub fn significance_table(field: &str, reports: &[(String, SignificanceReport)]) -> Table {
    let mut out = Table::new(
        "significance",
        [
            "family", "hypothesis", "grouping_field", "f_statistic", "p_raw", "p_adjusted", "rejected",
            "alpha", "family_size",
        ],
    );
    for (family, r) in reports {
        out.push(vec![
            family.as_str().into(),
            r.grouping.as_str().into(),
            field.into(),
            r.f_statistic.into(),
            r.p_raw.into(),
            r.p_adjusted.into(),
            r.rejected.into(),
            r.alpha.into(),
            r.family_size.into(),
        ]);
    }
    out
}

const DYNAMICS_COLUMNS: [&str; 30] = [
    "model",
    "task",
    "n_train_samples",
    "seed",
    "epoch_from",
    "epoch_to",
    "metric",
    "quality",
    "matched_samples",
    "incomplete_samples",
    "only_in_from",
    "only_in_to",
    "concordant",
    "relatively_overconfident",
    "relatively_underconfident",
    "zero_delta",
    "confidence_increased",
    "conf_up_quality_improved",
    "conf_up_quality_not_improved",
    "conf_up_quality_not_worse",
    "conf_up_quality_worse",
    "eligible_pairs",
    "classified_pairs",
    "qual_same_conf_same",
    "qual_same_conf_flips",
    "qual_flips_conf_flips",
    "qual_flips_conf_same",
    "later_ties",
    "case1_no_quality_change_fraction",
    "similarity_confidence_rho",
];

/// Quadrant proportions, confidence-increase breakdown (both zero-delta
/// conventions), pair-case proportions and drill-down.
pub fn dynamics_table(reports: &[DynamicsReport]) -> Table {
    let mut out = Table::new("dynamics", DYNAMICS_COLUMNS);
    for r in reports {
        let k = &r.checkpoint_from;
        let q = &r.quadrants;
        let ci = &q.confidence_increase;
        let pc = r.pair_cases.as_ref();
        let prop = |case: PairCase| Cell::Num(pc.map(|p| p.proportion(case)));
        out.push(vec![
            k.model_name.as_str().into(),
            k.task_name.as_str().into(),
            k.n_train_samples.into(),
            k.seed.into(),
            k.epoch.into(),
            r.checkpoint_to.epoch.into(),
            r.metric_name.as_str().into(),
            r.quality_name.as_str().into(),
            r.matched_samples.into(),
            r.incomplete_samples.into(),
            r.only_in_from.into(),
            r.only_in_to.into(),
            q.proportions[0].into(),
            q.proportions[1].into(),
            q.proportions[2].into(),
            q.zero_delta.into(),
            ci.confidence_increased.into(),
            ci.quality_improved.into(),
            ci.quality_not_improved.into(),
            ci.quality_not_worse.into(),
            ci.quality_worse.into(),
            r.eligible_pairs.into(),
            pc.map_or(0, |p| p.classified_pairs).into(),
            prop(PairCase::QualSameConfSame),
            prop(PairCase::QualSameConfFlips),
            prop(PairCase::QualFlipsConfFlips),
            prop(PairCase::QualFlipsConfSame),
            pc.map_or(0, |p| p.later_ties).into(),
            r.case1_no_quality_change_fraction.into(),
            r.similarity_confidence_rho.into(),
        ]);
    }
    out
}

/// Scatter-ready per-sample deltas.
pub fn sample_points_table(rows: &[(CheckpointKey, CheckpointKey, String, Vec<SamplePoint>)]) -> Table {
    let mut out = Table::new(
        "samples",
        [
            "model", "task", "n_train_samples", "seed", "epoch_from", "epoch_to", "metric", "sample_id", "dq",
            "dc", "quadrant",
        ],
    );
    for (from, to, metric, points) in rows {
        for p in points {
            let quadrant = serde_json::to_value(p.quadrant()).expect("label serializes");
            out.push(vec![
                from.model_name.as_str().into(),
                from.task_name.as_str().into(),
                from.n_train_samples.into(),
                from.seed.into(),
                from.epoch.into(),
                to.epoch.into(),
                metric.as_str().into(),
                p.sample_id.as_str().into(),
                p.dq().into(),
                p.dc().into(),
                quadrant.as_str().unwrap_or_default().into(),
            ]);
        }
    }
    out
}

pub fn detection_table(rows: &[(CheckpointKey, DetectionReport)]) -> Table {
    let mut out = Table::new(
        "detection",
        with_key(&["metric", "auroc", "n_pos", "n_neg", "rescale_min", "rescale_max"]),
    );
    for (k, r) in rows {
        let mut row = key_cells(k);
        row.extend([
            r.metric_name.as_str().into(),
            r.auroc.into(),
            r.n_pos.into(),
            r.n_neg.into(),
            r.rescale_min.into(),
            r.rescale_max.into(),
        ]);
        out.push(row);
    }
    out
}
