//! The twelve confidence metrics and per-record scoring.
//!
//! Every metric carries a fixed orientation. Probability-like metrics grow
//! with confidence; entropy-, divergence- and dissimilarity-like metrics grow
//! with uncertainty. Analyses call [`Metric::align`] first so that larger
//! aligned values always mean "more confident".

use std::collections::BTreeMap;
use std::fmt;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::records::{BeamSet, CheckpointKey, DropoutSet, GenerationRecord, SequenceEvidence};
use crate::textsim::{self, QualityMetric};

/// Beams entering the importance-weighted average.
pub const IMP_WT_TOP_BEAMS: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    AvgTokProb,
    AvgTokEnt,
    DoEnt,
    BsImpWt,
    BsRatios,
    BsSums,
    DoBleuVar,
    DoKlDiv,
    DoMeteorVar,
    CocoaMsp,
    CocoaMte,
    CocoaPpl,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    Probability,
    Consistency,
    Combined,
}

impl Metric {
    pub const ALL: [Metric; 12] = [
        Metric::AvgTokProb,
        Metric::AvgTokEnt,
        Metric::DoEnt,
        Metric::BsImpWt,
        Metric::BsRatios,
        Metric::BsSums,
        Metric::DoBleuVar,
        Metric::DoKlDiv,
        Metric::DoMeteorVar,
        Metric::CocoaMsp,
        Metric::CocoaMte,
        Metric::CocoaPpl,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Metric::AvgTokProb => "avg_tok_prob",
            Metric::AvgTokEnt => "avg_tok_ent",
            Metric::DoEnt => "do_ent",
            Metric::BsImpWt => "bs_imp_wt",
            Metric::BsRatios => "bs_ratios",
            Metric::BsSums => "bs_sums",
            Metric::DoBleuVar => "do_bleu_var",
            Metric::DoKlDiv => "do_kl_div",
            Metric::DoMeteorVar => "do_meteor_var",
            Metric::CocoaMsp => "cocoa_msp",
            Metric::CocoaMte => "cocoa_mte",
            Metric::CocoaPpl => "cocoa_ppl",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|m| m.name() == name)
    }

    pub fn family(self) -> Family {
        match self {
            Metric::AvgTokProb
            | Metric::AvgTokEnt
            | Metric::DoEnt
            | Metric::BsImpWt
            | Metric::BsRatios
            | Metric::BsSums => Family::Probability,
            Metric::DoBleuVar | Metric::DoKlDiv | Metric::DoMeteorVar => Family::Consistency,
            Metric::CocoaMsp | Metric::CocoaMte | Metric::CocoaPpl => Family::Combined,
        }
    }

    pub fn higher_is_confident(self) -> bool {
        matches!(
            self,
            Metric::AvgTokProb | Metric::BsRatios | Metric::BsSums | Metric::DoMeteorVar
        )
    }

    /// Maps a raw value so that larger means more confident.
    pub fn align(self, value: f64) -> f64 {
        if self.higher_is_confident() {
            value
        } else {
            -value
        }
    }

    pub fn spec(self) -> MetricSpec {
        MetricSpec {
            name: self,
            family: self.family(),
            higher_is_confident: self.higher_is_confident(),
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MetricSpec {
    pub name: Metric,
    pub family: Family,
    pub higher_is_confident: bool,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MetricError {
    #[error("sequence has no tokens")]
    EmptySequence,
    #[error("token entropies are missing")]
    MissingEntropies,
    #[error("record has no beams")]
    MissingBeams,
    #[error("need {need} beams, have {have}")]
    TooFewBeams { need: usize, have: usize },
    #[error("k must be at least {min}, got {k}")]
    InvalidK { k: usize, min: usize },
    #[error("record has no dropout samples")]
    MissingDropout,
    #[error("need at least {need} dropout samples, have {have}")]
    TooFewDropout { need: usize, have: usize },
    #[error("aligned dropout distributions are missing")]
    MissingAligned,
    #[error("aligned distributions cover {found} positions, expected {expected}")]
    PositionMismatch { expected: usize, found: usize },
}

fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// Mean token log-probability.
pub fn avg_tok_prob(h: &SequenceEvidence) -> Result<f64, MetricError> {
    if h.token_logprobs.is_empty() {
        return Err(MetricError::EmptySequence);
    }
    Ok(mean(&h.token_logprobs))
}

/// Mean per-token entropy in nats.
pub fn avg_tok_ent(h: &SequenceEvidence) -> Result<f64, MetricError> {
    let ent = h.token_entropies.as_ref().ok_or(MetricError::MissingEntropies)?;
    if ent.is_empty() {
        return Err(MetricError::EmptySequence);
    }
    Ok(mean(ent))
}

/// Mean over dropout decodes of each decode's mean token entropy.
pub fn do_ent(d: &DropoutSet) -> Result<f64, MetricError> {
    if d.samples.is_empty() {
        return Err(MetricError::MissingDropout);
    }
    let per_sample = d
        .samples
        .iter()
        .map(avg_tok_ent)
        .collect::<Result<Vec<_>, _>>()?;
    Ok(mean(&per_sample))
}

fn length_normalized(beam: &SequenceEvidence) -> Result<f64, MetricError> {
    if beam.is_empty() {
        return Err(MetricError::EmptySequence);
    }
    Ok(beam.joint_logprob / beam.len() as f64)
}

/// Softmax of the length-normalized log-probabilities of the top beams
/// (at most [`IMP_WT_TOP_BEAMS`]).
pub fn importance_weights(b: &BeamSet) -> Result<Vec<f64>, MetricError> {
    if b.is_empty() {
        return Err(MetricError::MissingBeams);
    }
    let scores = b
        .beams
        .iter()
        .take(IMP_WT_TOP_BEAMS)
        .map(length_normalized)
        .collect::<Result<Vec<_>, _>>()?;
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / z).collect())
}

/// Negated importance-weighted average of the top beams' length-normalized
/// log-probabilities. Larger means less confident.
pub fn bs_imp_wt(b: &BeamSet) -> Result<f64, MetricError> {
    let weights = importance_weights(b)?;
    let mut acc = 0.0;
    for (w, beam) in weights.iter().zip(&b.beams) {
        acc += w * length_normalized(beam)?;
    }
    Ok(-acc)
}

impl BeamSet {
    /// Fills [`BeamSet::importance_weights`].
    pub fn attach_importance_weights(&mut self) -> Result<(), MetricError> {
        self.importance_weights = Some(importance_weights(self)?);
        Ok(())
    }
}

/// Probability ratio between the top beam and the k-th beam.
pub fn bs_ratios(b: &BeamSet, k: usize) -> Result<f64, MetricError> {
    if k < 2 {
        return Err(MetricError::InvalidK { k, min: 2 });
    }
    if b.len() < k {
        return Err(MetricError::TooFewBeams { need: k, have: b.len() });
    }
    Ok((b.beams[0].joint_logprob - b.beams[k - 1].joint_logprob).exp())
}

/// Total probability of the top k beams.
pub fn bs_sums(b: &BeamSet, k: usize) -> Result<f64, MetricError> {
    if k < 1 {
        return Err(MetricError::InvalidK { k, min: 1 });
    }
    if b.len() < k {
        return Err(MetricError::TooFewBeams { need: k, have: b.len() });
    }
    let lps: Vec<f64> = b.beams[..k].iter().map(|s| s.joint_logprob).collect();
    Ok(log_sum_exp(&lps).exp())
}

fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

fn require_pairs(d: &DropoutSet) -> Result<(), MetricError> {
    if d.len() < 2 {
        return Err(MetricError::TooFewDropout { need: 2, have: d.len() });
    }
    Ok(())
}

/// Sum over ordered pairs of distinct dropout decodes of (1 - BLEU)^2.
pub fn do_bleu_var(d: &DropoutSet) -> Result<f64, MetricError> {
    require_pairs(d)?;
    let mut total = 0.0;
    for (i, a) in d.samples.iter().enumerate() {
        for (j, b) in d.samples.iter().enumerate() {
            if i != j {
                let bleu = textsim::sentence_bleu(&a.text, &b.text).value;
                total += (1.0 - bleu).powi(2);
            }
        }
    }
    Ok(total)
}

/// Mean METEOR over ordered pairs of distinct dropout decodes.
pub fn do_meteor_var(d: &DropoutSet) -> Result<f64, MetricError> {
    require_pairs(d)?;
    let n = d.len();
    let mut total = 0.0;
    for (i, a) in d.samples.iter().enumerate() {
        for (j, b) in d.samples.iter().enumerate() {
            if i != j {
                total += textsim::meteor_lite(&a.text, &b.text).value;
            }
        }
    }
    Ok(total / (n * (n - 1)) as f64)
}

/// Sum over dropout instances of the position-averaged KL divergence from
/// each instance's aligned distribution to the instances' mean distribution.
///
/// `positions` is the primary hypothesis length the distributions were
/// force-decoded along.
pub fn do_kl_div(d: &DropoutSet, positions: usize) -> Result<f64, MetricError> {
    let aligned = d
        .aligned_distributions
        .as_ref()
        .ok_or(MetricError::MissingAligned)?;
    if aligned.is_empty() {
        return Err(MetricError::MissingAligned);
    }
    if positions == 0 {
        return Err(MetricError::EmptySequence);
    }
    if let Some(bad) = aligned.iter().find(|a| a.len() != positions) {
        return Err(MetricError::PositionMismatch {
            expected: positions,
            found: bad.len(),
        });
    }
    let n = aligned.len() as f64;
    let mut kl_per_instance = vec![0.0; aligned.len()];
    for t in 0..positions {
        if aligned.iter().all(|inst| inst[t] == aligned[0][t]) {
            continue;
        }
        // Mean distribution over the union of the instances' supports.
        let mut mixture: BTreeMap<u32, f64> = BTreeMap::new();
        for inst in aligned {
            let dist = &inst[t];
            for (id, p) in dist.token_ids.iter().zip(&dist.probs) {
                *mixture.entry(*id).or_insert(0.0) += p / n;
            }
        }
        let mass: f64 = mixture.values().sum();
        for (i, inst) in aligned.iter().enumerate() {
            let dist = &inst[t];
            let kl: f64 = dist
                .token_ids
                .iter()
                .zip(&dist.probs)
                .filter(|(_, p)| **p > 0.0)
                .map(|(id, p)| p * (p / (mixture[id] / mass)).ln())
                .sum();
            kl_per_instance[i] += kl.max(0.0);
        }
    }
    Ok(kl_per_instance.iter().map(|kl| kl / positions as f64).sum())
}

/// Probability-based factor of a CoCoA score.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CocoaBase {
    /// 1 - exp(mean token log-probability)
    Msp,
    /// mean token entropy
    Mte,
    /// exp(-mean token log-probability) - 1
    Ppl,
}

impl CocoaBase {
    pub fn metric(self) -> Metric {
        match self {
            CocoaBase::Msp => Metric::CocoaMsp,
            CocoaBase::Mte => Metric::CocoaMte,
            CocoaBase::Ppl => Metric::CocoaPpl,
        }
    }

    pub fn uncertainty(self, h: &SequenceEvidence) -> Result<f64, MetricError> {
        Ok(match self {
            CocoaBase::Msp => -avg_tok_prob(h)?.exp_m1(),
            CocoaBase::Mte => avg_tok_ent(h)?,
            CocoaBase::Ppl => (-avg_tok_prob(h)?).exp_m1(),
        })
    }
}

/// Similarity used for CoCoA's consistency factor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CocoaSimilarity {
    #[default]
    ChrfPlus,
    TokenF1,
    Bleu,
    MeteorLite,
}

impl CocoaSimilarity {
    pub const ALL: [CocoaSimilarity; 4] = [
        CocoaSimilarity::ChrfPlus,
        CocoaSimilarity::TokenF1,
        CocoaSimilarity::Bleu,
        CocoaSimilarity::MeteorLite,
    ];

    pub fn name(self) -> &'static str {
        match self {
            CocoaSimilarity::ChrfPlus => "chrf_plus",
            CocoaSimilarity::TokenF1 => "token_f1",
            CocoaSimilarity::Bleu => "bleu",
            CocoaSimilarity::MeteorLite => "meteor_lite",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|s| s.name() == name)
    }

    /// Similarity of `hyp` to a single other decode.
    pub fn similarity(self, hyp: &str, other: &str) -> f64 {
        match self {
            CocoaSimilarity::ChrfPlus => textsim::chrf_plus(hyp, &[other.to_string()]).value,
            CocoaSimilarity::TokenF1 => textsim::token_f1(hyp, &[other.to_string()]).value,
            CocoaSimilarity::Bleu => textsim::sentence_bleu(hyp, other).value,
            CocoaSimilarity::MeteorLite => textsim::meteor_lite(hyp, other).value,
        }
    }
}

/// Mean dissimilarity between the hypothesis and the dropout decodes.
pub fn mean_dissimilarity(
    hyp: &SequenceEvidence,
    d: &DropoutSet,
    sim: CocoaSimilarity,
) -> Result<f64, MetricError> {
    if d.is_empty() {
        return Err(MetricError::MissingDropout);
    }
    let total: f64 = d
        .samples
        .iter()
        .map(|s| 1.0 - sim.similarity(&hyp.text, &s.text))
        .sum();
    Ok(total / d.len() as f64)
}

/// CoCoA uncertainty: probability-based uncertainty times mean dissimilarity
/// to the dropout decodes.
pub fn cocoa(base: CocoaBase, r: &GenerationRecord, sim: CocoaSimilarity) -> Result<f64, MetricError> {
    let d = r.dropout.as_ref().ok_or(MetricError::MissingDropout)?;
    let u = base.uncertainty(&r.hypothesis)?;
    Ok(u * mean_dissimilarity(&r.hypothesis, d, sim)?)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScoreConfig {
    pub metrics: Vec<Metric>,
    pub qualities: Vec<QualityMetric>,
    /// Beam index for `bs_ratios` and `bs_sums`; `None` uses every beam.
    pub k: Option<usize>,
    pub cocoa_similarity: CocoaSimilarity,
}

impl Default for ScoreConfig {
    fn default() -> Self {
        Self {
            metrics: Metric::ALL.to_vec(),
            qualities: QualityMetric::REFERENCE_BASED.to_vec(),
            k: None,
            cocoa_similarity: CocoaSimilarity::default(),
        }
    }
}

impl ScoreConfig {
    /// Computes one metric for one record.
    pub fn compute(&self, metric: Metric, r: &GenerationRecord) -> Result<f64, MetricError> {
        let beams = || r.beams.as_ref().ok_or(MetricError::MissingBeams);
        let dropout = || r.dropout.as_ref().ok_or(MetricError::MissingDropout);
        match metric {
            Metric::AvgTokProb => avg_tok_prob(&r.hypothesis),
            Metric::AvgTokEnt => avg_tok_ent(&r.hypothesis),
            Metric::DoEnt => do_ent(dropout()?),
            Metric::BsImpWt => bs_imp_wt(beams()?),
            Metric::BsRatios => {
                let b = beams()?;
                bs_ratios(b, self.k.unwrap_or(b.len()))
            }
            Metric::BsSums => {
                let b = beams()?;
                bs_sums(b, self.k.unwrap_or(b.len()))
            }
            Metric::DoBleuVar => do_bleu_var(dropout()?),
            Metric::DoKlDiv => do_kl_div(dropout()?, r.hypothesis.len()),
            Metric::DoMeteorVar => do_meteor_var(dropout()?),
            Metric::CocoaMsp => cocoa(CocoaBase::Msp, r, self.cocoa_similarity),
            Metric::CocoaMte => cocoa(CocoaBase::Mte, r, self.cocoa_similarity),
            Metric::CocoaPpl => cocoa(CocoaBase::Ppl, r, self.cocoa_similarity),
        }
    }
}

/// Why a cell is missing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Diagnostic {
    pub sample_id: String,
    pub checkpoint: String,
    pub column: String,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRow {
    pub sample_id: String,
    pub checkpoint: CheckpointKey,
    /// Aligned with [`ScoreTable::metrics`].
    pub metrics: Vec<Option<f64>>,
    /// Aligned with [`ScoreTable::qualities`].
    pub qualities: Vec<Option<f64>>,
    pub correctness_label: Option<bool>,
    pub train_similarity: Option<f64>,
}

/// Metric and quality values for a set of records. A cell is `None` exactly
/// when the evidence its metric needs is absent; nothing is imputed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreTable {
    pub metrics: Vec<Metric>,
    pub qualities: Vec<QualityMetric>,
    pub rows: Vec<ScoreRow>,
    pub diagnostics: Vec<Diagnostic>,
}

/// Scores one record: every requested metric with evidence, plus qualities.
pub fn score_all(r: &GenerationRecord, config: &ScoreConfig) -> (ScoreRow, Vec<Diagnostic>) {
    let mut diagnostics = Vec::new();
    let metrics = config
        .metrics
        .iter()
        .map(|m| match config.compute(*m, r) {
            Ok(v) => Some(v),
            Err(e) => {
                diagnostics.push(Diagnostic {
                    sample_id: r.sample_id.clone(),
                    checkpoint: r.checkpoint.label(),
                    column: m.name().to_string(),
                    message: e.to_string(),
                });
                None
            }
        })
        .collect();
    let qualities = config
        .qualities
        .iter()
        .map(|q| {
            let v = q.score(&r.hypothesis.text, &r.references).map(|s| s.value);
            if v.is_none() {
                diagnostics.push(Diagnostic {
                    sample_id: r.sample_id.clone(),
                    checkpoint: r.checkpoint.label(),
                    column: q.name().to_string(),
                    message: "quality metric has no text form".to_string(),
                });
            }
            v
        })
        .collect();
    let row = ScoreRow {
        sample_id: r.sample_id.clone(),
        checkpoint: r.checkpoint.clone(),
        metrics,
        qualities,
        correctness_label: r.correctness_label,
        train_similarity: r.train_similarity,
    };
    (row, diagnostics)
}

impl ScoreTable {
    /// Scores records in parallel; rows come out ordered by checkpoint, then sample id.
    pub fn build(records: &[GenerationRecord], config: &ScoreConfig) -> Self {
        let mut scored: Vec<(ScoreRow, Vec<Diagnostic>)> =
            records.par_iter().map(|r| score_all(r, config)).collect();
        scored.sort_by(|a, b| {
            (&a.0.checkpoint, &a.0.sample_id).cmp(&(&b.0.checkpoint, &b.0.sample_id))
        });
        let mut rows = Vec::with_capacity(scored.len());
        let mut diagnostics = Vec::new();
        for (row, diag) in scored {
            rows.push(row);
            diagnostics.extend(diag);
        }
        Self {
            metrics: config.metrics.clone(),
            qualities: config.qualities.clone(),
            rows,
            diagnostics,
        }
    }

    pub fn metric_index(&self, metric: Metric) -> Option<usize> {
        self.metrics.iter().position(|m| *m == metric)
    }

    pub fn quality_index(&self, quality: QualityMetric) -> Option<usize> {
        self.qualities.iter().position(|q| *q == quality)
    }

    pub fn metric_values(&self, metric: Metric) -> Option<Vec<Option<f64>>> {
        let i = self.metric_index(metric)?;
        Some(self.rows.iter().map(|r| r.metrics[i]).collect())
    }

    pub fn quality_values(&self, quality: QualityMetric) -> Option<Vec<Option<f64>>> {
        let i = self.quality_index(quality)?;
        Some(self.rows.iter().map(|r| r.qualities[i]).collect())
    }

    /// Splits rows by checkpoint, keeping column layout.
    pub fn by_checkpoint(&self) -> BTreeMap<CheckpointKey, ScoreTable> {
        let mut out: BTreeMap<CheckpointKey, ScoreTable> = BTreeMap::new();
        for row in &self.rows {
            out.entry(row.checkpoint.clone())
                .or_insert_with(|| ScoreTable {
                    metrics: self.metrics.clone(),
                    qualities: self.qualities.clone(),
                    rows: Vec::new(),
                    diagnostics: Vec::new(),
                })
                .rows
                .push(row.clone());
        }
        for d in &self.diagnostics {
            if let Some(t) = out.values_mut().find(|t| t.rows[0].checkpoint.label() == d.checkpoint) {
                t.diagnostics.push(d.clone());
            }
        }
        out
    }

    /// Number of missing cells per metric column.
    pub fn missing_counts(&self) -> Vec<(Metric, usize)> {
        self.metrics
            .iter()
            .enumerate()
            .map(|(i, m)| (*m, self.rows.iter().filter(|r| r.metrics[i].is_none()).count()))
            .collect()
    }
}
