//! How confidence and quality move between two checkpoints.
//!
//! Per sample, the (quality delta, aligned confidence delta) pair lands in a
//! quadrant. Per sample pair, the relative order of quality and of confidence
//! is compared before and after: a pair whose orders agree at the earlier
//! checkpoint can keep both orders, flip only its confidence order (Case 1),
//! flip only its quality order (Case 2), or flip both.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::confidence::{Metric, ScoreTable};
use crate::records::{check_pairable, CheckpointKey, GenerationRecord, RecordsError};
use crate::stats::{self, CorrelationReport, StatsError};
use crate::textsim::{cosine_similarity, QualityMetric, SimilarityError};

/// Default cap on classified sample pairs.
pub const DEFAULT_PAIR_CAP: usize = 200_000;

#[derive(Debug, Error)]
pub enum DynamicsError {
    #[error("no samples have both scores at both checkpoints")]
    NoEligibleSamples,
    #[error("no relatively correlated sample pairs at the earlier checkpoint")]
    NoEligiblePairs,
    #[error("no Case 1 pairs")]
    NoCase1Pairs,
    #[error("need at least two epochs, have {0}")]
    TooFewEpochs(usize),
    #[error("sample {0} has no train_similarity and no embedding")]
    MissingSimilarity(String),
    #[error("fewer than three samples carry similarity evidence")]
    InsufficientSimilarity,
    #[error("no training embeddings supplied")]
    NoTrainingEmbeddings,
    #[error(transparent)]
    Pairing(#[from] RecordsError),
    #[error(transparent)]
    Stats(#[from] StatsError),
    #[error(transparent)]
    Similarity(#[from] SimilarityError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuadrantLabel {
    /// Quality and confidence moved together (or one did not move).
    Concordant,
    /// Confidence rose while quality fell.
    RelativelyOverconfident,
    /// Confidence fell while quality rose.
    RelativelyUnderconfident,
}

/// Classifies a sample by its quality delta and aligned confidence delta.
/// A zero delta on either axis is concordant.
pub fn classify_quadrant(dq: f64, dc_aligned: f64) -> QuadrantLabel {
    if dc_aligned > 0.0 && dq < 0.0 {
        QuadrantLabel::RelativelyOverconfident
    } else if dc_aligned < 0.0 && dq > 0.0 {
        QuadrantLabel::RelativelyUnderconfident
    } else {
        QuadrantLabel::Concordant
    }
}

/// One sample's quality and aligned confidence at two checkpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplePoint {
    pub sample_id: String,
    pub quality_from: f64,
    pub confidence_from: f64,
    pub quality_to: f64,
    pub confidence_to: f64,
}

impl SamplePoint {
    pub fn dq(&self) -> f64 {
        self.quality_to - self.quality_from
    }

    pub fn dc(&self) -> f64 {
        self.confidence_to - self.confidence_from
    }

    pub fn quadrant(&self) -> QuadrantLabel {
        classify_quadrant(self.dq(), self.dc())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairedPoints {
    pub from: CheckpointKey,
    pub to: CheckpointKey,
    pub points: Vec<SamplePoint>,
    pub only_in_from: usize,
    pub only_in_to: usize,
    /// Matched samples missing a cell at either checkpoint.
    pub incomplete: usize,
}

/// Matches two single-checkpoint tables by sample id and extracts aligned
/// confidence and quality at both ends.
pub fn paired_points(
    from: &ScoreTable,
    to: &ScoreTable,
    metric: Metric,
    quality: QualityMetric,
) -> Result<PairedPoints, DynamicsError> {
    let key_from = from.rows.first().ok_or(DynamicsError::NoEligibleSamples)?.checkpoint.clone();
    let key_to = to.rows.first().ok_or(DynamicsError::NoEligibleSamples)?.checkpoint.clone();
    check_pairable(&key_from, &key_to)?;
    let column = |t: &ScoreTable| -> Result<(usize, usize), StatsError> {
        Ok((
            t.metric_index(metric).ok_or_else(|| StatsError::UnknownColumn(metric.name().into()))?,
            t.quality_index(quality).ok_or_else(|| StatsError::UnknownColumn(quality.name().into()))?,
        ))
    };
    let (mf, qf) = column(from)?;
    let (mt, qt) = column(to)?;
    let to_index: HashMap<&str, usize> = to
        .rows
        .iter()
        .enumerate()
        .map(|(i, r)| (r.sample_id.as_str(), i))
        .collect();

    let mut points = Vec::new();
    let mut incomplete = 0;
    let mut matched = 0;
    for a in &from.rows {
        let Some(&j) = to_index.get(a.sample_id.as_str()) else {
            continue;
        };
        matched += 1;
        let b = &to.rows[j];
        match (a.metrics[mf], a.qualities[qf], b.metrics[mt], b.qualities[qt]) {
            (Some(cf), Some(qf), Some(ct), Some(qt)) => points.push(SamplePoint {
                sample_id: a.sample_id.clone(),
                quality_from: qf,
                confidence_from: metric.align(cf),
                quality_to: qt,
                confidence_to: metric.align(ct),
            }),
            _ => incomplete += 1,
        }
    }
    Ok(PairedPoints {
        from: key_from,
        to: key_to,
        points,
        only_in_from: from.rows.len() - matched,
        only_in_to: to.rows.len() - matched,
        incomplete,
    })
}

/// Samples whose aligned confidence rose, split by what their quality did.
/// Both conventions for a zero quality delta are kept.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfidenceIncreaseBreakdown {
    pub confidence_increased: usize,
    /// dq > 0
    pub quality_improved: usize,
    /// dq <= 0
    pub quality_not_improved: usize,
    /// dq >= 0
    pub quality_not_worse: usize,
    /// dq < 0
    pub quality_worse: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuadrantSummary {
    pub total: usize,
    pub concordant: usize,
    pub overconfident: usize,
    pub underconfident: usize,
    /// Ordered as (concordant, relatively overconfident, relatively underconfident).
    pub proportions: [f64; 3],
    /// Samples with a zero delta on either axis (all counted as concordant).
    pub zero_delta: usize,
    pub confidence_increase: ConfidenceIncreaseBreakdown,
}

pub fn quadrant_proportions(points: &[SamplePoint]) -> Result<QuadrantSummary, DynamicsError> {
    if points.is_empty() {
        return Err(DynamicsError::NoEligibleSamples);
    }
    let (mut conc, mut over, mut under, mut zero) = (0, 0, 0, 0);
    let mut inc = ConfidenceIncreaseBreakdown {
        confidence_increased: 0,
        quality_improved: 0,
        quality_not_improved: 0,
        quality_not_worse: 0,
        quality_worse: 0,
    };
    for p in points {
        let (dq, dc) = (p.dq(), p.dc());
        match classify_quadrant(dq, dc) {
            QuadrantLabel::Concordant => conc += 1,
            QuadrantLabel::RelativelyOverconfident => over += 1,
            QuadrantLabel::RelativelyUnderconfident => under += 1,
        }
        if dq == 0.0 || dc == 0.0 {
            zero += 1;
        }
        if dc > 0.0 {
            inc.confidence_increased += 1;
            if dq > 0.0 {
                inc.quality_improved += 1;
            } else {
                inc.quality_not_improved += 1;
            }
            if dq >= 0.0 {
                inc.quality_not_worse += 1;
            } else {
                inc.quality_worse += 1;
            }
        }
    }
    let n = points.len() as f64;
    Ok(QuadrantSummary {
        total: points.len(),
        concordant: conc,
        overconfident: over,
        underconfident: under,
        proportions: [conc as f64 / n, over as f64 / n, under as f64 / n],
        zero_delta: zero,
        confidence_increase: inc,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairCase {
    QualSameConfSame,
    /// Case 1: quality order holds, confidence order flips.
    QualSameConfFlips,
    QualFlipsConfFlips,
    /// Case 2: quality order flips, confidence order holds.
    QualFlipsConfSame,
}

impl PairCase {
    pub const ALL: [PairCase; 4] = [
        PairCase::QualSameConfSame,
        PairCase::QualSameConfFlips,
        PairCase::QualFlipsConfFlips,
        PairCase::QualFlipsConfSame,
    ];

    fn index(self) -> usize {
        match self {
            PairCase::QualSameConfSame => 0,
            PairCase::QualSameConfFlips => 1,
            PairCase::QualFlipsConfFlips => 2,
            PairCase::QualFlipsConfSame => 3,
        }
    }
}

fn sign(x: f64) -> i8 {
    if x > 0.0 {
        1
    } else if x < 0.0 {
        -1
    } else {
        0
    }
}

/// True when the pair is strictly ordered the same way in quality and
/// confidence at the earlier checkpoint.
pub fn relatively_correlated(a: &SamplePoint, b: &SamplePoint) -> bool {
    let sq = sign(a.quality_from - b.quality_from);
    sq != 0 && sq == sign(a.confidence_from - b.confidence_from)
}

/// Labels a pair by which orderings survive to the later checkpoint, or
/// `None` when the pair is not relatively correlated at the earlier one.
/// A tie at the later checkpoint counts as a flip.
pub fn classify_pair(a: &SamplePoint, b: &SamplePoint) -> Option<PairCase> {
    if !relatively_correlated(a, b) {
        return None;
    }
    let before = sign(a.quality_from - b.quality_from);
    let q_kept = sign(a.quality_to - b.quality_to) == before;
    let c_kept = sign(a.confidence_to - b.confidence_to) == before;
    Some(match (q_kept, c_kept) {
        (true, true) => PairCase::QualSameConfSame,
        (true, false) => PairCase::QualSameConfFlips,
        (false, false) => PairCase::QualFlipsConfFlips,
        (false, true) => PairCase::QualFlipsConfSame,
    })
}

fn later_tie(a: &SamplePoint, b: &SamplePoint) -> bool {
    a.quality_to == b.quality_to || a.confidence_to == b.confidence_to
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairCaseSummary {
    /// Relatively correlated pairs at the earlier checkpoint.
    pub eligible_pairs: u64,
    /// Pairs actually classified (all eligible pairs unless capped).
    pub classified_pairs: usize,
    /// Ordered as in [`PairCase::ALL`].
    pub counts: [usize; 4],
    pub proportions: [f64; 4],
    /// Classified pairs with a quality or confidence tie at the later checkpoint.
    pub later_ties: usize,
    pub case1_no_quality_change: usize,
    pub case1_no_quality_change_fraction: Option<f64>,
    pub pair_cap: Option<usize>,
    pub seed: u64,
}

impl PairCaseSummary {
    pub fn count(&self, case: PairCase) -> usize {
        self.counts[case.index()]
    }

    pub fn proportion(&self, case: PairCase) -> f64 {
        self.proportions[case.index()]
    }
}

/// Eligible pairs, all of them or a seeded uniform sample of `max_pairs`.
///
/// Sampling is a single reservoir pass over the eligible pairs in index
/// order, so a cap at or above the eligible count returns every pair.
pub fn eligible_pairs(points: &[SamplePoint], max_pairs: Option<usize>, seed: u64) -> (u64, Vec<(usize, usize)>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut kept = Vec::new();
    let mut seen: u64 = 0;
    for i in 0..points.len() {
        for j in (i + 1)..points.len() {
            if !relatively_correlated(&points[i], &points[j]) {
                continue;
            }
            match max_pairs {
                Some(cap) if seen >= cap as u64 => {
                    let slot = rng.random_range(0..=seen);
                    if slot < cap as u64 {
                        kept[slot as usize] = (i, j);
                    }
                }
                _ => kept.push((i, j)),
            }
            seen += 1;
        }
    }
    (seen, kept)
}

/// Case proportions over eligible pairs, with the Case 1 drill-down.
pub fn pair_case_proportions(
    points: &[SamplePoint],
    max_pairs: Option<usize>,
    seed: u64,
) -> Result<PairCaseSummary, DynamicsError> {
    let (eligible, pairs) = eligible_pairs(points, max_pairs.filter(|c| *c > 0), seed);
    if pairs.is_empty() {
        return Err(DynamicsError::NoEligiblePairs);
    }
    let mut counts = [0usize; 4];
    let mut ties = 0;
    let mut case1 = Vec::new();
    for &(i, j) in &pairs {
        let case = classify_pair(&points[i], &points[j]).expect("pair was eligible");
        counts[case.index()] += 1;
        if later_tie(&points[i], &points[j]) {
            ties += 1;
        }
        if case == PairCase::QualSameConfFlips {
            case1.push((i, j));
        }
    }
    let n = pairs.len() as f64;
    let no_change = case1
        .iter()
        .filter(|(i, j)| case1_driven_by_frozen_quality(&points[*i], &points[*j]))
        .count();
    Ok(PairCaseSummary {
        eligible_pairs: eligible,
        classified_pairs: pairs.len(),
        counts,
        proportions: counts.map(|c| c as f64 / n),
        later_ties: ties,
        case1_no_quality_change: no_change,
        case1_no_quality_change_fraction: (!case1.is_empty()).then(|| no_change as f64 / case1.len() as f64),
        pair_cap: max_pairs,
        seed,
    })
}

/// The worse sample gained confidence with its quality unchanged, or the
/// better sample lost confidence with its quality unchanged.
fn case1_driven_by_frozen_quality(a: &SamplePoint, b: &SamplePoint) -> bool {
    let (worse, better) = if a.quality_from < b.quality_from { (a, b) } else { (b, a) };
    (worse.confidence_to > worse.confidence_from && worse.dq() == 0.0)
        || (better.confidence_to < better.confidence_from && better.dq() == 0.0)
}

/// Fraction of Case 1 pairs explained by confidence drift on a sample whose
/// quality did not change.
pub fn case1_no_quality_change_fraction(
    points: &[SamplePoint],
    case1_pairs: &[(usize, usize)],
) -> Result<f64, DynamicsError> {
    if case1_pairs.is_empty() {
        return Err(DynamicsError::NoCase1Pairs);
    }
    let hits = case1_pairs
        .iter()
        .filter(|(i, j)| case1_driven_by_frozen_quality(&points[*i], &points[*j]))
        .count();
    Ok(hits as f64 / case1_pairs.len() as f64)
}

/// Highest cosine similarity between `embedding` and any training embedding.
pub fn max_train_similarity(embedding: &[f64], training: &[Vec<f64>]) -> Result<f64, DynamicsError> {
    let mut best: Option<f64> = None;
    for t in training {
        let s = cosine_similarity(embedding, t)?;
        best = Some(best.map_or(s, |b: f64| b.max(s)));
    }
    best.ok_or(DynamicsError::NoTrainingEmbeddings)
}

/// Fills `train_similarity` from embeddings where it is absent. Returns the
/// number of records filled.
pub fn derive_train_similarity(
    records: &mut [GenerationRecord],
    training: &[Vec<f64>],
) -> Result<usize, DynamicsError> {
    let mut filled = 0;
    for r in records.iter_mut().filter(|r| r.train_similarity.is_none()) {
        let e = r
            .embedding
            .as_ref()
            .ok_or_else(|| DynamicsError::MissingSimilarity(r.sample_id.clone()))?;
        r.train_similarity = Some(max_train_similarity(e, training)?);
        filled += 1;
    }
    Ok(filled)
}

/// Spearman correlation between aligned confidence and similarity to the
/// training set.
pub fn similarity_confidence_correlation(table: &ScoreTable, metric: Metric) -> Result<f64, DynamicsError> {
    let mi = table
        .metric_index(metric)
        .ok_or_else(|| StatsError::UnknownColumn(metric.name().into()))?;
    let (conf, sim): (Vec<f64>, Vec<f64>) = table
        .rows
        .iter()
        .filter_map(|r| Some((metric.align(r.metrics[mi]?), r.train_similarity?)))
        .unzip();
    if conf.len() < 3 {
        return Err(DynamicsError::InsufficientSimilarity);
    }
    Ok(stats::spearman_rho(&conf, &sim)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryPoint {
    pub epoch: u32,
    pub report: Option<CorrelationReport>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochTrajectory {
    pub metric_name: String,
    pub quality_name: String,
    pub points: Vec<TrajectoryPoint>,
    /// Largest decrease in rho between adjacent epochs that both have a
    /// value; zero when rho never falls.
    pub max_adjacent_drop: Option<f64>,
}

impl EpochTrajectory {
    pub fn rhos(&self) -> Vec<Option<f64>> {
        self.points.iter().map(|p| p.report.as_ref().map(|r| r.rho)).collect()
    }
}

/// Correlation at each epoch of one run, ordered by epoch.
pub fn epoch_trajectory(
    tables: &[&ScoreTable],
    metric: Metric,
    quality: QualityMetric,
) -> Result<EpochTrajectory, DynamicsError> {
    if tables.len() < 2 {
        return Err(DynamicsError::TooFewEpochs(tables.len()));
    }
    let mut points: Vec<TrajectoryPoint> = tables
        .iter()
        .filter_map(|t| {
            let epoch = t.rows.first()?.checkpoint.epoch;
            Some(match stats::correlate_checkpoint(t, metric, quality) {
                Ok(r) => TrajectoryPoint {
                    epoch,
                    report: Some(r),
                    error: None,
                },
                Err(e) => TrajectoryPoint {
                    epoch,
                    report: None,
                    error: Some(e.to_string()),
                },
            })
        })
        .collect();
    points.sort_by_key(|p| p.epoch);
    let rhos: Vec<Option<f64>> = points.iter().map(|p| p.report.as_ref().map(|r| r.rho)).collect();
    let max_adjacent_drop = max_adjacent_drop(&rhos);
    Ok(EpochTrajectory {
        metric_name: metric.name().into(),
        quality_name: quality.name().into(),
        points,
        max_adjacent_drop,
    })
}

/// Largest `rho[t] - rho[t + 1]` over adjacent present values, floored at 0.
pub fn max_adjacent_drop(rhos: &[Option<f64>]) -> Option<f64> {
    rhos.windows(2)
        .filter_map(|w| Some(w[0]? - w[1]?))
        .fold(None, |acc: Option<f64>, d| Some(acc.map_or(d, |a| a.max(d))))
        .map(|d| d.max(0.0))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DynamicsConfig {
    pub pair_cap: Option<usize>,
    pub seed: u64,
}

impl Default for DynamicsConfig {
    fn default() -> Self {
        Self {
            pair_cap: Some(DEFAULT_PAIR_CAP),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DynamicsReport {
    pub checkpoint_from: CheckpointKey,
    pub checkpoint_to: CheckpointKey,
    pub metric_name: String,
    pub quality_name: String,
    pub matched_samples: usize,
    pub only_in_from: usize,
    pub only_in_to: usize,
    pub incomplete_samples: usize,
    pub quadrants: QuadrantSummary,
    pub pair_cases: Option<PairCaseSummary>,
    pub eligible_pairs: u64,
    pub case1_no_quality_change_fraction: Option<f64>,
    pub similarity_confidence_rho: Option<f64>,
}

/// Everything comparing two checkpoints for one metric/quality pair.
pub fn dynamics_report(
    from: &ScoreTable,
    to: &ScoreTable,
    metric: Metric,
    quality: QualityMetric,
    config: &DynamicsConfig,
) -> Result<(DynamicsReport, Vec<SamplePoint>), DynamicsError> {
    let paired = paired_points(from, to, metric, quality)?;
    let quadrants = quadrant_proportions(&paired.points)?;
    let pair_cases = match pair_case_proportions(&paired.points, config.pair_cap, config.seed) {
        Ok(s) => Some(s),
        Err(DynamicsError::NoEligiblePairs) => None,
        Err(e) => return Err(e),
    };
    let similarity_confidence_rho = similarity_confidence_correlation(to, metric).ok();
    let report = DynamicsReport {
        checkpoint_from: paired.from.clone(),
        checkpoint_to: paired.to.clone(),
        metric_name: metric.name().into(),
        quality_name: quality.name().into(),
        matched_samples: paired.points.len() + paired.incomplete,
        only_in_from: paired.only_in_from,
        only_in_to: paired.only_in_to,
        incomplete_samples: paired.incomplete,
        eligible_pairs: pair_cases.as_ref().map_or(0, |p| p.eligible_pairs),
        case1_no_quality_change_fraction: pair_cases.as_ref().and_then(|p| p.case1_no_quality_change_fraction),
        quadrants,
        pair_cases,
        similarity_confidence_rho,
    };
    Ok((report, paired.points))
}
