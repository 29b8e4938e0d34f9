//! Rank correlation, one-way ANOVA with Holm step-down, AUROC and min-max
//! rescaling.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::confidence::{Metric, ScoreTable};
use crate::records::CheckpointKey;
use crate::textsim::QualityMetric;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum StatsError {
    #[error("length mismatch ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("need at least {need} values, have {have}")]
    TooShort { need: usize, have: usize },
    #[error("input is constant")]
    ConstantInput,
    #[error("non-finite value in input")]
    NonFinite,
    #[error("insufficient joint support: {0} samples have both cells")]
    InsufficientSupport(usize),
    #[error("column {0} is not in the score table")]
    UnknownColumn(String),
    #[error("score table spans more than one checkpoint")]
    MixedCheckpoints,
    #[error("need at least two groups of at least two values each")]
    TooFewGroups,
    #[error("degenerate groups: every value is identical")]
    DegenerateGroups,
    #[error("degenerate groups: zero variance within every group")]
    ZeroWithinVariance,
    #[error("labels contain a single class ({positives} positive, {negatives} negative)")]
    SingleClass { positives: usize, negatives: usize },
    #[error("alpha must lie in (0, 1), got {0}")]
    InvalidAlpha(f64),
}

fn check_finite(xs: &[f64]) -> Result<(), StatsError> {
    if xs.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(StatsError::NonFinite)
    }
}

/// 1-based ranks; tied values share the mean of the ranks they span.
pub fn average_ranks(xs: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..xs.len()).collect();
    order.sort_by(|&a, &b| xs[a].partial_cmp(&xs[b]).unwrap_or(Ordering::Equal));
    let mut ranks = vec![0.0; xs.len()];
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && xs[order[end]] == xs[order[start]] {
            end += 1;
        }
        // positions start..end hold ranks start+1..=end
        let rank = (start + 1 + end) as f64 / 2.0;
        for &i in &order[start..end] {
            ranks[i] = rank;
        }
        start = end;
    }
    ranks
}

/// Number of values that share their value with at least one other.
pub fn tied_count(xs: &[f64]) -> usize {
    let mut sorted = xs.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap_or(Ordering::Equal));
    let mut tied = 0;
    let mut i = 0;
    while i < sorted.len() {
        let mut j = i + 1;
        while j < sorted.len() && sorted[j] == sorted[i] {
            j += 1;
        }
        if j - i > 1 {
            tied += j - i;
        }
        i = j;
    }
    tied
}

fn pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (da, db) = (a - mx, b - my);
        sxy += da * db;
        sxx += da * da;
        syy += db * db;
    }
    (sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0)
}

/// Spearman's rho with tie-averaged ranks.
pub fn spearman_rho(x: &[f64], y: &[f64]) -> Result<f64, StatsError> {
    if x.len() != y.len() {
        return Err(StatsError::LengthMismatch(x.len(), y.len()));
    }
    if x.len() < 3 {
        return Err(StatsError::TooShort { need: 3, have: x.len() });
    }
    check_finite(x)?;
    check_finite(y)?;
    let is_constant = |v: &[f64]| v.iter().all(|a| *a == v[0]);
    if is_constant(x) || is_constant(y) {
        return Err(StatsError::ConstantInput);
    }
    Ok(pearson(&average_ranks(x), &average_ranks(y)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationReport {
    pub checkpoint: CheckpointKey,
    pub metric_name: String,
    pub quality_name: String,
    pub rho: f64,
    pub n: usize,
    pub orientation_aligned: bool,
    pub metric_ties: usize,
    pub quality_ties: usize,
}

/// Jointly present (aligned confidence, quality) pairs of one table.
pub fn joint_cells(
    table: &ScoreTable,
    metric: Metric,
    quality: QualityMetric,
) -> Result<(Vec<f64>, Vec<f64>), StatsError> {
    let mi = table
        .metric_index(metric)
        .ok_or_else(|| StatsError::UnknownColumn(metric.name().into()))?;
    let qi = table
        .quality_index(quality)
        .ok_or_else(|| StatsError::UnknownColumn(quality.name().into()))?;
    Ok(table
        .rows
        .iter()
        .filter_map(|r| Some((metric.align(r.metrics[mi]?), r.qualities[qi]?)))
        .unzip())
}

/// Orientation-aligned Spearman correlation between a metric and a quality
/// column at one checkpoint.
pub fn correlate_checkpoint(
    table: &ScoreTable,
    metric: Metric,
    quality: QualityMetric,
) -> Result<CorrelationReport, StatsError> {
    let checkpoint = table
        .rows
        .first()
        .map(|r| r.checkpoint.clone())
        .ok_or(StatsError::InsufficientSupport(0))?;
    if table.rows.iter().any(|r| r.checkpoint != checkpoint) {
        return Err(StatsError::MixedCheckpoints);
    }
    let (conf, qual) = joint_cells(table, metric, quality)?;
    if conf.len() < 3 {
        return Err(StatsError::InsufficientSupport(conf.len()));
    }
    let rho = spearman_rho(&conf, &qual)?;
    Ok(CorrelationReport {
        checkpoint,
        metric_name: metric.name().into(),
        quality_name: quality.name().into(),
        rho,
        n: conf.len(),
        orientation_aligned: true,
        metric_ties: tied_count(&conf),
        quality_ties: tied_count(&qual),
    })
}

/// Mean and sample standard deviation (`None` below two values).
pub fn mean_and_sd(values: &[f64]) -> Option<(f64, Option<f64>)> {
    if values.is_empty() {
        return None;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let sd = (values.len() > 1).then(|| {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    });
    Some((mean, sd))
}

// ---------------------------------------------------------------------------
// Special functions

const LANCZOS_G: f64 = 7.0;
const LANCZOS: [f64; 9] = [
    0.999_999_999_999_809_9,
    676.520_368_121_885_1,
    -1_259.139_216_722_402_8,
    771.323_428_777_653_1,
    -176.615_029_162_140_6,
    12.507_343_278_686_905,
    -0.138_571_095_265_720_12,
    9.984_369_578_019_572e-6,
    1.505_632_735_149_311_6e-7,
];

/// ln Γ(x) for x > 0 (Lanczos approximation).
pub fn ln_gamma(x: f64) -> f64 {
    if x < 0.5 {
        // reflection
        let pi = std::f64::consts::PI;
        return (pi / (pi * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut a = LANCZOS[0];
    let t = x + LANCZOS_G + 0.5;
    for (i, c) in LANCZOS.iter().enumerate().skip(1) {
        a += c / (x + i as f64);
    }
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + a.ln()
}

const CF_EPS: f64 = 1e-12;
const CF_TINY: f64 = 1e-300;
const CF_MAX_ITER: usize = 10_000;

/// Regularized incomplete beta I_x(a, b).
pub fn regularized_incomplete_beta(x: f64, a: f64, b: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    if x >= 1.0 {
        return 1.0;
    }
    let ln_front = ln_gamma(a + b) - ln_gamma(a) - ln_gamma(b) + a * x.ln() + b * (1.0 - x).ln();
    if x < (a + 1.0) / (a + b + 2.0) {
        (ln_front.exp() * beta_continued_fraction(x, a, b) / a).clamp(0.0, 1.0)
    } else {
        (1.0 - ln_front.exp() * beta_continued_fraction(1.0 - x, b, a) / b).clamp(0.0, 1.0)
    }
}

/// Modified Lentz evaluation of the incomplete-beta continued fraction.
fn beta_continued_fraction(x: f64, a: f64, b: f64) -> f64 {
    let qab = a + b;
    let qap = a + 1.0;
    let qam = a - 1.0;
    let mut c = 1.0;
    let mut d = 1.0 - qab * x / qap;
    if d.abs() < CF_TINY {
        d = CF_TINY;
    }
    d = 1.0 / d;
    let mut h = d;
    for m in 1..=CF_MAX_ITER {
        let m = m as f64;
        let m2 = 2.0 * m;
        let aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if d.abs() < CF_TINY {
            d = CF_TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < CF_TINY {
            c = CF_TINY;
        }
        d = 1.0 / d;
        h *= d * c;
        let aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if d.abs() < CF_TINY {
            d = CF_TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < CF_TINY {
            c = CF_TINY;
        }
        d = 1.0 / d;
        let delta = d * c;
        h *= delta;
        if (delta - 1.0).abs() < CF_EPS {
            break;
        }
    }
    h
}

/// Upper tail P(F > f) of the F distribution with (df1, df2) degrees of freedom.
pub fn f_survival(f: f64, df1: f64, df2: f64) -> f64 {
    if f <= 0.0 {
        return 1.0;
    }
    if f.is_infinite() {
        return 0.0;
    }
    regularized_incomplete_beta(df2 / (df2 + df1 * f), df2 / 2.0, df1 / 2.0)
}

// ---------------------------------------------------------------------------
// ANOVA + Holm

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnovaResult {
    pub f_statistic: f64,
    pub p_value: f64,
    pub df_between: usize,
    pub df_within: usize,
}

/// One-way ANOVA across groups.
pub fn one_way_anova(groups: &[Vec<f64>]) -> Result<AnovaResult, StatsError> {
    if groups.len() < 2 || groups.iter().any(|g| g.len() < 2) {
        return Err(StatsError::TooFewGroups);
    }
    for g in groups {
        check_finite(g)?;
    }
    let all: Vec<f64> = groups.iter().flatten().copied().collect();
    if all.iter().all(|v| *v == all[0]) {
        return Err(StatsError::DegenerateGroups);
    }
    let n = all.len();
    let k = groups.len();
    let grand = all.iter().sum::<f64>() / n as f64;
    let (mut ss_between, mut ss_within) = (0.0, 0.0);
    for g in groups {
        let m = g.iter().sum::<f64>() / g.len() as f64;
        ss_between += g.len() as f64 * (m - grand).powi(2);
        ss_within += g.iter().map(|v| (v - m).powi(2)).sum::<f64>();
    }
    if ss_within == 0.0 {
        return Err(StatsError::ZeroWithinVariance);
    }
    let df_between = k - 1;
    let df_within = n - k;
    let f = (ss_between / df_between as f64) / (ss_within / df_within as f64);
    Ok(AnovaResult {
        f_statistic: f,
        p_value: f_survival(f, df_between as f64, df_within as f64),
        df_between,
        df_within,
    })
}

/// Holm step-down adjusted p-values, in input order.
pub fn holm_adjust(p: &[f64]) -> Vec<f64> {
    let m = p.len();
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| p[a].partial_cmp(&p[b]).unwrap_or(Ordering::Equal).then(a.cmp(&b)));
    let mut adjusted = vec![0.0; m];
    let mut running = 0.0f64;
    for (rank, &i) in order.iter().enumerate() {
        let scaled = ((m - rank) as f64 * p[i]).min(1.0);
        running = running.max(scaled);
        adjusted[i] = running;
    }
    adjusted
}

/// One hypothesis of a family: "these groups share a mean".
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnovaHypothesis {
    pub label: String,
    pub groups: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SignificanceReport {
    pub grouping: String,
    pub f_statistic: f64,
    pub p_raw: f64,
    pub p_adjusted: f64,
    pub rejected: bool,
    pub alpha: f64,
    pub family_size: usize,
}

/// ANOVA per hypothesis, Holm-corrected across the family.
pub fn anova_holm(family: &[AnovaHypothesis], alpha: f64) -> Result<Vec<SignificanceReport>, StatsError> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(StatsError::InvalidAlpha(alpha));
    }
    let results = family
        .iter()
        .map(|h| one_way_anova(&h.groups))
        .collect::<Result<Vec<_>, _>>()?;
    let raw: Vec<f64> = results.iter().map(|r| r.p_value).collect();
    let adjusted = holm_adjust(&raw);
    Ok(family
        .iter()
        .zip(results)
        .zip(adjusted)
        .map(|((h, r), p_adj)| SignificanceReport {
            grouping: h.label.clone(),
            f_statistic: r.f_statistic,
            p_raw: r.p_value,
            p_adjusted: p_adj,
            rejected: p_adj <= alpha,
            alpha,
            family_size: family.len(),
        })
        .collect())
}

// ---------------------------------------------------------------------------
// Detection

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rescaled {
    pub min: f64,
    pub max: f64,
}

/// Maps scores linearly onto [0, 1]; the minimum goes to 0, the maximum to 1.
pub fn min_max_rescale(scores: &[f64]) -> Result<(Vec<f64>, Rescaled), StatsError> {
    check_finite(scores)?;
    let min = scores.iter().copied().fold(f64::INFINITY, f64::min);
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if scores.len() < 2 || !(max > min) {
        return Err(StatsError::ConstantInput);
    }
    let span = max - min;
    let out = scores
        .iter()
        .map(|s| ((s - min) / span).clamp(0.0, 1.0))
        .collect();
    Ok((out, Rescaled { min, max }))
}

/// Probability that a positive outscores a negative, ties counting one half.
/// Computed from the rank sum of the positives.
pub fn auroc(scores: &[f64], labels: &[bool]) -> Result<f64, StatsError> {
    if scores.len() != labels.len() {
        return Err(StatsError::LengthMismatch(scores.len(), labels.len()));
    }
    check_finite(scores)?;
    let positives = labels.iter().filter(|l| **l).count();
    let negatives = labels.len() - positives;
    if positives == 0 || negatives == 0 {
        return Err(StatsError::SingleClass { positives, negatives });
    }
    let ranks = average_ranks(scores);
    let rank_sum: f64 = ranks
        .iter()
        .zip(labels)
        .filter(|(_, l)| **l)
        .map(|(r, _)| r)
        .sum();
    let p = positives as f64;
    let u = rank_sum - p * (p + 1.0) / 2.0;
    Ok((u / (p * negatives as f64)).clamp(0.0, 1.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionReport {
    pub metric_name: String,
    pub auroc: f64,
    pub n_pos: usize,
    pub n_neg: usize,
    pub rescale_min: Option<f64>,
    pub rescale_max: Option<f64>,
}

/// Rescales aligned confidence onto [0, 1] and scores it as a detector of
/// correct outputs. Constant scores skip the rescale and record no bounds.
pub fn detect(metric_name: &str, aligned_scores: &[f64], labels: &[bool]) -> Result<DetectionReport, StatsError> {
    let (scores, bounds) = match min_max_rescale(aligned_scores) {
        Ok((s, b)) => (s, Some(b)),
        Err(StatsError::ConstantInput) => (aligned_scores.to_vec(), None),
        Err(e) => return Err(e),
    };
    let auc = auroc(&scores, labels)?;
    let n_pos = labels.iter().filter(|l| **l).count();
    Ok(DetectionReport {
        metric_name: metric_name.into(),
        auroc: auc,
        n_pos,
        n_neg: labels.len() - n_pos,
        rescale_min: bounds.map(|b| b.min),
        rescale_max: bounds.map(|b| b.max),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ranks_average_ties() {
        assert_eq!(average_ranks(&[10.0, 20.0, 20.0, 5.0]), vec![2.0, 3.5, 3.5, 1.0]);
        assert_eq!(tied_count(&[1.0, 2.0, 2.0, 3.0, 3.0, 3.0]), 5);
    }

    #[test]
    fn spearman_perfect() {
        assert_eq!(spearman_rho(&[1.0, 2.0, 3.0], &[10.0, 20.0, 30.0]).unwrap(), 1.0);
        assert_eq!(spearman_rho(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap(), -1.0);
    }

    #[test]
    fn spearman_errors() {
        assert_eq!(spearman_rho(&[1.0, 2.0], &[1.0]), Err(StatsError::LengthMismatch(2, 1)));
        assert_eq!(spearman_rho(&[1.0, 2.0], &[1.0, 2.0]), Err(StatsError::TooShort { need: 3, have: 2 }));
        assert_eq!(spearman_rho(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]), Err(StatsError::ConstantInput));
    }

    #[test]
    fn incomplete_beta_known_values() {
        // I_x(1, 1) = x; I_x(a, 1) = x^a; I_0.5(a, a) = 0.5
        assert!((regularized_incomplete_beta(0.3, 1.0, 1.0) - 0.3).abs() < 1e-12);
        assert!((regularized_incomplete_beta(0.3, 2.5, 1.0) - 0.3f64.powf(2.5)).abs() < 1e-12);
        assert!((regularized_incomplete_beta(0.5, 3.7, 3.7) - 0.5).abs() < 1e-12);
        assert!((ln_gamma(5.0) - 24f64.ln()).abs() < 1e-12);
        assert!((ln_gamma(0.5) - std::f64::consts::PI.sqrt().ln()).abs() < 1e-12);
    }

    #[test]
    fn anova_identical_groups() {
        let r = one_way_anova(&[vec![1.0, 2.0, 3.0], vec![1.0, 2.0, 3.0]]).unwrap();
        assert_eq!(r.f_statistic, 0.0);
        assert_eq!(r.p_value, 1.0);
        assert_eq!(one_way_anova(&[vec![2.0, 2.0], vec![2.0, 2.0]]), Err(StatsError::DegenerateGroups));
        assert_eq!(one_way_anova(&[vec![1.0, 1.0], vec![2.0, 2.0]]), Err(StatsError::ZeroWithinVariance));
        assert_eq!(one_way_anova(&[vec![1.0, 2.0]]), Err(StatsError::TooFewGroups));
    }

    #[test]
    fn anova_three_groups() {
        let r = one_way_anova(&[vec![1.0, 2.0, 3.0], vec![4.0, 5.0, 6.0], vec![7.0, 8.0, 9.0]]).unwrap();
        assert!((r.f_statistic - 27.0).abs() < 1e-12);
        // P(F(2, 6) > 27) = (1 + 27/3)^-3 = 0.001
        assert!((r.p_value - 0.001).abs() < 1e-12);
    }

    #[test]
    fn holm_single_hypothesis_is_raw_threshold() {
        let fam = [AnovaHypothesis {
            label: "x".into(),
            groups: vec![vec![1.0, 2.0, 3.0], vec![4.0, 5.0, 6.0], vec![7.0, 8.0, 9.0]],
        }];
        let r = anova_holm(&fam, 0.05).unwrap();
        assert_eq!(r[0].p_adjusted, r[0].p_raw);
        assert!(r[0].rejected);
        let r = anova_holm(&fam, 0.0005).unwrap();
        assert!(!r[0].rejected);
    }

    #[test]
    fn holm_adjustment_by_hand() {
        // sorted: 0.01*3, max(0.02*2, .03), max(0.04, .04) -> 0.03, 0.04, 0.04
        let adj = holm_adjust(&[0.04, 0.01, 0.02]);
        assert!((adj[1] - 0.03).abs() < 1e-15);
        assert!((adj[2] - 0.04).abs() < 1e-15);
        assert!((adj[0] - 0.04).abs() < 1e-15);
        assert_eq!(holm_adjust(&[0.9, 0.8]), vec![1.0, 1.0]);
    }

    #[test]
    fn rescale_examples() {
        assert_eq!(min_max_rescale(&[2.0, 4.0, 6.0]).unwrap().0, vec![0.0, 0.5, 1.0]);
        let (v, b) = min_max_rescale(&[-3.0, -1.0]).unwrap();
        assert_eq!(v, vec![0.0, 1.0]);
        assert_eq!(b, Rescaled { min: -3.0, max: -1.0 });
        assert_eq!(min_max_rescale(&[5.0, 5.0]), Err(StatsError::ConstantInput));
    }

    #[test]
    fn auroc_examples() {
        assert_eq!(auroc(&[0.9, 0.1], &[true, false]).unwrap(), 1.0);
        assert_eq!(auroc(&[0.3; 4], &[true, false, true, false]).unwrap(), 0.5);
        assert_eq!(auroc(&[0.8, 0.6, 0.4, 0.2], &[true, false, true, false]).unwrap(), 0.75);
        assert_eq!(
            auroc(&[0.1, 0.2], &[true, true]),
            Err(StatsError::SingleClass { positives: 2, negatives: 0 })
        );
    }

    #[test]
    fn detect_records_bounds() {
        let r = detect("m", &[-2.0, 0.0, 2.0], &[false, true, true]).unwrap();
        assert_eq!(r.auroc, 1.0);
        assert_eq!((r.n_pos, r.n_neg), (2, 1));
        assert_eq!((r.rescale_min, r.rescale_max), (Some(-2.0), Some(2.0)));
        let r = detect("m", &[1.0, 1.0], &[false, true]).unwrap();
        assert_eq!(r.auroc, 0.5);
        assert_eq!(r.rescale_min, None);
    }

    #[test]
    fn seed_aggregation() {
        let (m, sd) = mean_and_sd(&[0.1, 0.2, 0.3]).unwrap();
        assert!((m - 0.2).abs() < 1e-15);
        assert!((sd.unwrap() - 0.1).abs() < 1e-15);
        assert_eq!(mean_and_sd(&[0.5]), Some((0.5, None)));
        assert_eq!(mean_and_sd(&[]), None);
    }
}
