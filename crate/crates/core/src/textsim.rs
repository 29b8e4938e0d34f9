//! Output-quality and text-similarity functions.
//!
//! Quality functions (`exact_match`, `token_f1`, `chrf_plus`) take a list of
//! references and keep the best score. The pairwise functions used inside the
//! consistency metrics (`sentence_bleu`, `meteor_lite`) compare two single
//! strings and are directional.
//!
//! Fixed parameter choices (echoed into report metadata by [`parameters`]):
//!
//! * chrF+: character n-grams 1..=6 with whitespace removed, word unigrams
//!   with leading/trailing punctuation split off, beta = 2, precision and
//!   recall averaged over the orders present on both sides.
//! * BLEU: whitespace tokens, n = 1..=4, uniform weights, brevity penalty,
//!   add-one smoothing on the counts of orders 2..=4.
//! * METEOR (lite): casefolded exact unigram matching only, alignment that
//!   maximizes matches and then minimizes chunks.

use std::collections::HashMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QualityMetric {
    ChrfPlus,
    TokenF1,
    ExactMatch,
    Bleu,
    MeteorLite,
    Cosine,
}

impl QualityMetric {
    pub const REFERENCE_BASED: [QualityMetric; 3] =
        [QualityMetric::ChrfPlus, QualityMetric::TokenF1, QualityMetric::ExactMatch];

    pub fn name(self) -> &'static str {
        match self {
            QualityMetric::ChrfPlus => "chrf_plus",
            QualityMetric::TokenF1 => "token_f1",
            QualityMetric::ExactMatch => "exact_match",
            QualityMetric::Bleu => "bleu",
            QualityMetric::MeteorLite => "meteor_lite",
            QualityMetric::Cosine => "cosine",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        [
            QualityMetric::ChrfPlus,
            QualityMetric::TokenF1,
            QualityMetric::ExactMatch,
            QualityMetric::Bleu,
            QualityMetric::MeteorLite,
            QualityMetric::Cosine,
        ]
        .into_iter()
        .find(|m| m.name() == name)
    }

    /// Scores a hypothesis against references. BLEU and METEOR keep the best
    /// single-reference score; cosine has no text form and returns `None`.
    pub fn score(self, hyp: &str, refs: &[String]) -> Option<QualityScore> {
        match self {
            QualityMetric::ChrfPlus => Some(chrf_plus(hyp, refs)),
            QualityMetric::TokenF1 => Some(token_f1(hyp, refs)),
            QualityMetric::ExactMatch => Some(exact_match(hyp, refs)),
            QualityMetric::Bleu => best_of(self, refs, |r| sentence_bleu(hyp, r).value),
            QualityMetric::MeteorLite => best_of(self, refs, |r| meteor_lite(hyp, r).value),
            QualityMetric::Cosine => None,
        }
    }
}

impl fmt::Display for QualityMetric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QualityScore {
    pub metric: QualityMetric,
    pub value: f64,
}

impl QualityScore {
    fn new(metric: QualityMetric, value: f64) -> Self {
        Self { metric, value }
    }
}

fn best_of(
    metric: QualityMetric,
    refs: &[String],
    score: impl Fn(&str) -> f64,
) -> Option<QualityScore> {
    refs.iter()
        .map(|r| score(r))
        .fold(None, |best: Option<f64>, v| Some(best.map_or(v, |b| b.max(v))))
        .map(|v| QualityScore::new(metric, v))
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SimilarityError {
    #[error("vector dimensions differ ({0} vs {1})")]
    DimensionMismatch(usize, usize),
    #[error("zero-norm vector")]
    ZeroNorm,
}

fn normalize_answer(s: &str) -> String {
    s.split_whitespace()
        .map(str::to_lowercase)
        .collect::<Vec<_>>()
        .join(" ")
}

fn casefolded_tokens(s: &str) -> Vec<String> {
    s.split_whitespace().map(str::to_lowercase).collect()
}

/// 1 when the trimmed, whitespace-collapsed, casefolded hypothesis equals any
/// reference normalized the same way.
pub fn exact_match(hyp: &str, refs: &[String]) -> QualityScore {
    let h = normalize_answer(hyp);
    let hit = refs.iter().any(|r| normalize_answer(r) == h);
    QualityScore::new(QualityMetric::ExactMatch, if hit { 1.0 } else { 0.0 })
}

/// Bag-of-tokens F1 on casefolded whitespace tokens, best over references.
pub fn token_f1(hyp: &str, refs: &[String]) -> QualityScore {
    let h = casefolded_tokens(hyp);
    let best = refs
        .iter()
        .map(|r| f1_between(&h, &casefolded_tokens(r)))
        .fold(0.0, f64::max);
    QualityScore::new(QualityMetric::TokenF1, best)
}

fn f1_between(h: &[String], r: &[String]) -> f64 {
    match (h.is_empty(), r.is_empty()) {
        (true, true) => return 1.0,
        (true, false) | (false, true) => return 0.0,
        _ => {}
    }
    let ref_counts = counts(r.iter().map(String::as_str));
    let hyp_counts = counts(h.iter().map(String::as_str));
    let overlap: usize = hyp_counts
        .iter()
        .map(|(tok, c)| (*c).min(ref_counts.get(tok).copied().unwrap_or(0)))
        .sum();
    if overlap == 0 {
        return 0.0;
    }
    let p = overlap as f64 / h.len() as f64;
    let r = overlap as f64 / r.len() as f64;
    2.0 * p * r / (p + r)
}

fn counts<T: std::hash::Hash + Eq>(items: impl Iterator<Item = T>) -> HashMap<T, usize> {
    let mut map = HashMap::new();
    for item in items {
        *map.entry(item).or_insert(0) += 1;
    }
    map
}

const CHRF_CHAR_ORDER: usize = 6;
const CHRF_WORD_ORDER: usize = 1;
const CHRF_BETA: f64 = 2.0;

/// chrF+ in [0, 1], best over references.
pub fn chrf_plus(hyp: &str, refs: &[String]) -> QualityScore {
    chrf_with_beta(hyp, refs, CHRF_BETA)
}

/// chrF+ with a caller-chosen recall weight.
pub fn chrf_with_beta(hyp: &str, refs: &[String], beta: f64) -> QualityScore {
    let hyp_grams = chrf_ngrams(hyp);
    let best = refs
        .iter()
        .map(|r| chrf_score(&chrf_stats(&hyp_grams, &chrf_ngrams(r)), beta))
        .fold(0.0, f64::max);
    QualityScore::new(QualityMetric::ChrfPlus, best)
}

/// Per-order n-gram counts: six character orders, then word unigrams.
fn chrf_ngrams(s: &str) -> Vec<HashMap<String, usize>> {
    let chars: Vec<char> = s.chars().filter(|c| !c.is_whitespace()).collect();
    let mut orders = Vec::with_capacity(CHRF_CHAR_ORDER + CHRF_WORD_ORDER);
    for n in 1..=CHRF_CHAR_ORDER {
        let grams = if chars.len() >= n {
            counts(chars.windows(n).map(|w| w.iter().collect::<String>()))
        } else {
            HashMap::new()
        };
        orders.push(grams);
    }
    let words = split_punctuation(s);
    for n in 1..=CHRF_WORD_ORDER {
        let grams = if words.len() >= n {
            counts(words.windows(n).map(|w| w.join(" ")))
        } else {
            HashMap::new()
        };
        orders.push(grams);
    }
    orders
}

fn is_ascii_punct(c: char) -> bool {
    c.is_ascii_punctuation()
}

/// Whitespace tokens with one leading or trailing punctuation mark split off.
fn split_punctuation(s: &str) -> Vec<String> {
    let mut out = Vec::new();
    for w in s.split_whitespace() {
        let chars: Vec<char> = w.chars().collect();
        if chars.len() == 1 {
            out.push(w.to_string());
        } else if is_ascii_punct(chars[chars.len() - 1]) {
            out.push(chars[..chars.len() - 1].iter().collect());
            out.push(chars[chars.len() - 1].to_string());
        } else if is_ascii_punct(chars[0]) {
            out.push(chars[0].to_string());
            out.push(chars[1..].iter().collect());
        } else {
            out.push(w.to_string());
        }
    }
    out
}

/// (hyp count, ref count, matches) per order.
fn chrf_stats(
    hyp: &[HashMap<String, usize>],
    r: &[HashMap<String, usize>],
) -> Vec<(usize, usize, usize)> {
    hyp.iter()
        .zip(r)
        .map(|(h, r)| {
            let hyp_total: usize = h.values().sum();
            let ref_total: usize = r.values().sum();
            let matches: usize = h
                .iter()
                .map(|(g, c)| (*c).min(r.get(g).copied().unwrap_or(0)))
                .sum();
            (hyp_total, ref_total, matches)
        })
        .collect()
}

fn chrf_score(stats: &[(usize, usize, usize)], beta: f64) -> f64 {
    let factor = beta * beta;
    let (mut prec, mut rec, mut orders) = (0.0, 0.0, 0usize);
    for &(h, r, m) in stats {
        if h > 0 && r > 0 {
            prec += m as f64 / h as f64;
            rec += m as f64 / r as f64;
            orders += 1;
        }
    }
    if orders == 0 {
        return 0.0;
    }
    prec /= orders as f64;
    rec /= orders as f64;
    if prec + rec == 0.0 {
        return 0.0;
    }
    (1.0 + factor) * prec * rec / (factor * prec + rec)
}

const BLEU_MAX_ORDER: usize = 4;

/// Smoothed sentence-level BLEU of `hyp` against the single reference `reference`.
pub fn sentence_bleu(hyp: &str, reference: &str) -> QualityScore {
    let h: Vec<&str> = hyp.split_whitespace().collect();
    let r: Vec<&str> = reference.split_whitespace().collect();
    QualityScore::new(QualityMetric::Bleu, bleu_tokens(&h, &r))
}

fn bleu_tokens(h: &[&str], r: &[&str]) -> f64 {
    if h.is_empty() {
        return 0.0;
    }
    let mut log_sum = 0.0;
    for n in 1..=BLEU_MAX_ORDER {
        let hyp_grams = ngram_counts(h, n);
        let ref_grams = ngram_counts(r, n);
        let total: usize = hyp_grams.values().sum();
        let correct: usize = hyp_grams
            .iter()
            .map(|(g, c)| (*c).min(ref_grams.get(g).copied().unwrap_or(0)))
            .sum();
        let (correct, total) = if n == 1 {
            if correct == 0 {
                return 0.0;
            }
            (correct as f64, total as f64)
        } else {
            (correct as f64 + 1.0, total as f64 + 1.0)
        };
        log_sum += (correct / total).ln();
    }
    let bp = if h.len() < r.len() {
        (1.0 - r.len() as f64 / h.len() as f64).exp()
    } else {
        1.0
    };
    bp * (log_sum / BLEU_MAX_ORDER as f64).exp()
}

fn ngram_counts<'a>(tokens: &'a [&'a str], n: usize) -> HashMap<&'a [&'a str], usize> {
    let mut map = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *map.entry(w).or_insert(0) += 1;
        }
    }
    map
}

/// Search budget for the chunk-minimizing alignment before settling for the
/// best alignment found so far.
const METEOR_SEARCH_BUDGET: usize = 200_000;

/// Exact-match METEOR of `hyp` against `reference`.
pub fn meteor_lite(hyp: &str, reference: &str) -> QualityScore {
    let h = casefolded_tokens(hyp);
    let r = casefolded_tokens(reference);
    let value = match align_unigrams(&h, &r) {
        None => 0.0,
        Some(Alignment { matches, chunks }) => meteor_from_counts(matches, chunks, h.len(), r.len()),
    };
    QualityScore::new(QualityMetric::MeteorLite, value)
}

/// Score from alignment statistics: F_mean with recall weighted 9:1, times
/// the fragmentation penalty.
pub fn meteor_from_counts(matches: usize, chunks: usize, hyp_len: usize, ref_len: usize) -> f64 {
    if matches == 0 {
        return 0.0;
    }
    let m = matches as f64;
    let p = m / hyp_len as f64;
    let r = m / ref_len as f64;
    let f_mean = 10.0 * p * r / (r + 9.0 * p);
    let penalty = 0.5 * (chunks as f64 / m).powi(3);
    f_mean * (1.0 - penalty)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Alignment {
    pub matches: usize,
    pub chunks: usize,
}

/// Maximum-match alignment with the fewest chunks, or `None` without matches.
pub fn align_unigrams(h: &[String], r: &[String]) -> Option<Alignment> {
    let hyp_counts = counts(h.iter().map(String::as_str));
    let ref_counts = counts(r.iter().map(String::as_str));
    // Matches still owed per word type if the alignment is to be maximal.
    let mut owed: HashMap<&str, usize> = hyp_counts
        .iter()
        .filter_map(|(w, c)| ref_counts.get(w).map(|rc| (*w, (*c).min(*rc))))
        .collect();
    let matches: usize = owed.values().sum();
    if matches == 0 {
        return None;
    }
    let mut positions: HashMap<&str, Vec<usize>> = HashMap::new();
    for (j, w) in r.iter().enumerate() {
        positions.entry(w.as_str()).or_default().push(j);
    }
    // Hypothesis occurrences of each word type remaining at or after index i.
    let mut remaining_after = vec![0usize; h.len()];
    {
        let mut seen: HashMap<&str, usize> = HashMap::new();
        for i in (0..h.len()).rev() {
            let c = seen.entry(h[i].as_str()).or_insert(0);
            *c += 1;
            remaining_after[i] = *c;
        }
    }

    let mut search = ChunkSearch {
        h,
        positions: &positions,
        remaining_after: &remaining_after,
        used: vec![false; r.len()],
        best: usize::MAX,
        visited: 0,
    };
    search.descend(0, None, 0, &mut owed);
    Some(Alignment {
        matches,
        chunks: search.best,
    })
}

struct ChunkSearch<'a> {
    h: &'a [String],
    positions: &'a HashMap<&'a str, Vec<usize>>,
    remaining_after: &'a [usize],
    used: Vec<bool>,
    best: usize,
    visited: usize,
}

impl<'a> ChunkSearch<'a> {
    /// `prev` is the reference index aligned to hypothesis position `i - 1`,
    /// if that position is aligned.
    fn descend(&mut self, i: usize, prev: Option<usize>, chunks: usize, owed: &mut HashMap<&'a str, usize>) {
        if chunks >= self.best {
            return;
        }
        if i == self.h.len() {
            self.best = chunks;
            return;
        }
        self.visited += 1;
        if self.visited > METEOR_SEARCH_BUDGET && self.best != usize::MAX {
            return;
        }
        let word = self.h[i].as_str();
        let need = owed.get(word).copied().unwrap_or(0);
        if need > 0 {
            // Try the continuation of the current chunk first.
            let mut candidates: Vec<usize> = self.positions[word]
                .iter()
                .copied()
                .filter(|j| !self.used[*j])
                .collect();
            if let Some(p) = prev {
                if let Some(k) = candidates.iter().position(|j| *j == p + 1) {
                    candidates.swap(0, k);
                }
            }
            for j in candidates {
                let extends = prev.is_some_and(|p| p + 1 == j);
                self.used[j] = true;
                owed.insert(word, need - 1);
                self.descend(i + 1, Some(j), chunks + usize::from(!extends), owed);
                owed.insert(word, need);
                self.used[j] = false;
            }
        }
        // Skipping is allowed only if later occurrences can still pay what is owed.
        if self.remaining_after[i] > need {
            self.descend(i + 1, None, chunks, owed);
        }
    }
}

/// Cosine similarity of two equal-length, non-zero vectors.
pub fn cosine_similarity(u: &[f64], v: &[f64]) -> Result<f64, SimilarityError> {
    if u.len() != v.len() {
        return Err(SimilarityError::DimensionMismatch(u.len(), v.len()));
    }
    let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    let nu = u.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nv = v.iter().map(|a| a * a).sum::<f64>().sqrt();
    if nu == 0.0 || nv == 0.0 {
        return Err(SimilarityError::ZeroNorm);
    }
    Ok((dot / (nu * nv)).clamp(-1.0, 1.0))
}

/// Parameter choices for report metadata.
pub fn parameters() -> serde_json::Value {
    serde_json::json!({
        "exact_match": "trim, collapse whitespace, casefold",
        "token_f1": "casefolded whitespace tokens, multiset overlap, max over references",
        "chrf_plus": {
            "char_order": CHRF_CHAR_ORDER,
            "word_order": CHRF_WORD_ORDER,
            "beta": CHRF_BETA,
            "whitespace": false,
            "averaging": "precision and recall averaged over orders present on both sides",
        },
        "bleu": {
            "variant": "sentence_bleu",
            "max_order": BLEU_MAX_ORDER,
            "tokenize": "whitespace",
            "smoothing": "add-one on orders 2..4",
        },
        "meteor": {
            "variant": "meteor_lite",
            "matching": "casefolded exact unigrams",
            "alpha": 0.9,
            "gamma": 0.5,
            "beta": 3,
        },
    })
}
