//! Shared test helpers: direct-evaluation oracles written independently of
//! the library, random record generation, and fixture loading.
#![allow(dead_code)]

use std::collections::BTreeMap;
use std::path::PathBuf;

use confdyn::records::{BeamSet, CheckpointKey, Distribution, DropoutSet, GenerationRecord, SequenceEvidence};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;

pub fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

#[derive(Debug, Deserialize)]
pub struct TextCase {
    pub hyp: String,
    pub refs: Vec<String>,
    pub chrf_plus: f64,
    pub bleu_first_ref: f64,
}

#[derive(Debug, Deserialize)]
pub struct AnovaCase {
    pub groups: Vec<Vec<f64>>,
    pub f: f64,
    pub p: f64,
}

#[derive(Debug, Deserialize)]
pub struct FTailCase {
    pub f: f64,
    pub df1: f64,
    pub df2: f64,
    pub sf: f64,
}

pub fn load_json<T: for<'de> Deserialize<'de>>(name: &str) -> T {
    let text = std::fs::read_to_string(fixture(name)).expect("fixture readable");
    serde_json::from_str(&text).expect("fixture parses")
}

pub fn rel_close(actual: f64, expected: f64, tol: f64) -> bool {
    if actual == expected {
        return true;
    }
    (actual - expected).abs() <= tol * expected.abs().max(1e-300)
}

// ---------------------------------------------------------------------------
// Rank statistics

/// Average 1-based ranks by counting strictly smaller and equal values.
pub fn rank_oracle(xs: &[f64]) -> Vec<f64> {
    xs.iter()
        .map(|x| {
            let less = xs.iter().filter(|y| *y < x).count() as f64;
            let equal = xs.iter().filter(|y| *y == x).count() as f64;
            less + (equal + 1.0) / 2.0
        })
        .collect()
}

pub fn pearson_oracle(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let cov: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = y.iter().map(|b| (b - my).powi(2)).sum();
    cov / (vx * vy).sqrt()
}

pub fn spearman_oracle(x: &[f64], y: &[f64]) -> f64 {
    pearson_oracle(&rank_oracle(x), &rank_oracle(y))
}

/// Fraction of (positive, negative) pairs the positive wins, ties one half.
pub fn auroc_oracle(scores: &[f64], labels: &[bool]) -> f64 {
    let mut wins = 0.0;
    let mut pairs = 0.0;
    for (i, si) in scores.iter().enumerate() {
        for (j, sj) in scores.iter().enumerate() {
            if labels[i] && !labels[j] {
                pairs += 1.0;
                if si > sj {
                    wins += 1.0;
                } else if si == sj {
                    wins += 0.5;
                }
            }
        }
    }
    wins / pairs
}

// ---------------------------------------------------------------------------
// Text similarity

fn ngrams<T: Clone>(items: &[T], n: usize) -> Vec<Vec<T>> {
    if items.len() < n {
        return Vec::new();
    }
    (0..=items.len() - n).map(|i| items[i..i + n].to_vec()).collect()
}

/// Clipped match count by repeated removal from a pool.
fn clipped_matches<T: PartialEq + Clone>(hyp: &[T], reference: &[T]) -> usize {
    let mut pool = reference.to_vec();
    let mut m = 0;
    for g in hyp {
        if let Some(k) = pool.iter().position(|x| x == g) {
            pool.swap_remove(k);
            m += 1;
        }
    }
    m
}

/// Sentence BLEU, orders 1..=4, add-one on orders 2..=4, brevity penalty.
pub fn bleu_oracle(hyp: &str, reference: &str) -> f64 {
    let h: Vec<&str> = hyp.split_whitespace().collect();
    let r: Vec<&str> = reference.split_whitespace().collect();
    if h.is_empty() {
        return 0.0;
    }
    let mut precisions = Vec::new();
    for n in 1..=4 {
        let hg = ngrams(&h, n);
        let rg = ngrams(&r, n);
        let m = clipped_matches(&hg, &rg) as f64;
        if n == 1 {
            if m == 0.0 {
                return 0.0;
            }
            precisions.push(m / hg.len() as f64);
        } else {
            precisions.push((m + 1.0) / (hg.len() as f64 + 1.0));
        }
    }
    let geo = precisions.iter().product::<f64>().powf(0.25);
    let bp = if h.len() >= r.len() { 1.0 } else { (1.0 - r.len() as f64 / h.len() as f64).exp() };
    bp * geo
}

fn words_with_punct_split(s: &str) -> Vec<String> {
    let mut out = Vec::new();
    for w in s.split_whitespace() {
        let cs: Vec<char> = w.chars().collect();
        let last = *cs.last().unwrap();
        if cs.len() > 1 && last.is_ascii_punctuation() {
            out.push(cs[..cs.len() - 1].iter().collect());
            out.push(last.to_string());
        } else if cs.len() > 1 && cs[0].is_ascii_punctuation() {
            out.push(cs[0].to_string());
            out.push(cs[1..].iter().collect());
        } else {
            out.push(w.to_string());
        }
    }
    out
}

/// chrF with six character orders (whitespace dropped) and word unigrams;
/// P and R averaged over orders where both sides have n-grams.
pub fn chrf_oracle(hyp: &str, refs: &[String], beta: f64) -> f64 {
    refs.iter()
        .map(|r| {
            let hc: Vec<char> = hyp.chars().filter(|c| !c.is_whitespace()).collect();
            let rc: Vec<char> = r.chars().filter(|c| !c.is_whitespace()).collect();
            let mut ps = Vec::new();
            let mut rs = Vec::new();
            for n in 1..=6 {
                let hg = ngrams(&hc, n);
                let rg = ngrams(&rc, n);
                if !hg.is_empty() && !rg.is_empty() {
                    let m = clipped_matches(&hg, &rg) as f64;
                    ps.push(m / hg.len() as f64);
                    rs.push(m / rg.len() as f64);
                }
            }
            let hw = words_with_punct_split(hyp);
            let rw = words_with_punct_split(r);
            if !hw.is_empty() && !rw.is_empty() {
                let m = clipped_matches(&hw, &rw) as f64;
                ps.push(m / hw.len() as f64);
                rs.push(m / rw.len() as f64);
            }
            if ps.is_empty() {
                return 0.0;
            }
            let p = ps.iter().sum::<f64>() / ps.len() as f64;
            let rr = rs.iter().sum::<f64>() / rs.len() as f64;
            if p + rr == 0.0 {
                return 0.0;
            }
            let b2 = beta * beta;
            (1.0 + b2) * p * rr / (b2 * p + rr)
        })
        .fold(0.0, f64::max)
}

/// Exhaustive dynamic program over (position, used reference slots,
/// reference slot of the previous hypothesis token) returning the
/// lexicographically best (max matches, min chunks).
pub fn meteor_alignment_oracle(h: &[String], r: &[String]) -> (usize, usize) {
    assert!(r.len() <= 16);
    fn go(
        i: usize,
        mask: u32,
        prev: Option<usize>,
        h: &[String],
        r: &[String],
        memo: &mut BTreeMap<(usize, u32, Option<usize>), (usize, usize)>,
    ) -> (usize, usize) {
        if i == h.len() {
            return (0, 0);
        }
        if let Some(v) = memo.get(&(i, mask, prev)) {
            return *v;
        }
        let better = |a: (usize, usize), b: (usize, usize)| if a.0 > b.0 || (a.0 == b.0 && a.1 < b.1) { a } else { b };
        let mut best = go(i + 1, mask, None, h, r, memo);
        for j in 0..r.len() {
            if mask & (1 << j) == 0 && r[j] == h[i] {
                let (m, c) = go(i + 1, mask | (1 << j), Some(j), h, r, memo);
                let new_chunk = usize::from(prev != Some(j.wrapping_sub(1)) || j == 0);
                best = better((m + 1, c + new_chunk), best);
            }
        }
        memo.insert((i, mask, prev), best);
        best
    }
    go(0, 0, None, h, r, &mut BTreeMap::new())
}

pub fn meteor_oracle(hyp: &str, reference: &str) -> f64 {
    let h: Vec<String> = hyp.split_whitespace().map(str::to_lowercase).collect();
    let r: Vec<String> = reference.split_whitespace().map(str::to_lowercase).collect();
    let (m, ch) = meteor_alignment_oracle(&h, &r);
    if m == 0 {
        return 0.0;
    }
    let m = m as f64;
    let p = m / h.len() as f64;
    let rc = m / r.len() as f64;
    let fmean = p * rc / (0.9 * p + 0.1 * rc);
    fmean * (1.0 - 0.5 * (ch as f64 / m).powi(3))
}

// ---------------------------------------------------------------------------
// Confidence metric oracles, straight from the definitions.

pub fn oracle_avg_tok_prob(r: &GenerationRecord) -> f64 {
    let lp = &r.hypothesis.token_logprobs;
    lp.iter().sum::<f64>() / lp.len() as f64
}

fn mean_entropy(s: &SequenceEvidence) -> f64 {
    let e = s.token_entropies.as_ref().unwrap();
    e.iter().sum::<f64>() / e.len() as f64
}

pub fn oracle_avg_tok_ent(r: &GenerationRecord) -> f64 {
    mean_entropy(&r.hypothesis)
}

pub fn oracle_do_ent(r: &GenerationRecord) -> f64 {
    let d = &r.dropout.as_ref().unwrap().samples;
    d.iter().map(mean_entropy).sum::<f64>() / d.len() as f64
}

pub fn oracle_bs_imp_wt(r: &GenerationRecord) -> f64 {
    let beams = &r.beams.as_ref().unwrap().beams;
    let top: Vec<f64> = beams
        .iter()
        .take(10)
        .map(|b| b.token_logprobs.iter().sum::<f64>() / b.tokens.len() as f64)
        .collect();
    let z: f64 = top.iter().map(|l| l.exp()).sum();
    -top.iter().map(|l| l.exp() / z * l).sum::<f64>()
}

fn beam_prob(b: &SequenceEvidence) -> f64 {
    b.token_logprobs.iter().map(|lp| lp.exp()).product()
}

pub fn oracle_bs_ratios(r: &GenerationRecord) -> f64 {
    let beams = &r.beams.as_ref().unwrap().beams;
    beam_prob(&beams[0]) / beam_prob(&beams[beams.len() - 1])
}

pub fn oracle_bs_sums(r: &GenerationRecord) -> f64 {
    r.beams.as_ref().unwrap().beams.iter().map(beam_prob).sum()
}

pub fn oracle_do_bleu_var(r: &GenerationRecord) -> f64 {
    let d = &r.dropout.as_ref().unwrap().samples;
    let mut total = 0.0;
    for i in 0..d.len() {
        for j in 0..d.len() {
            if i != j {
                total += (1.0 - bleu_oracle(&d[i].text, &d[j].text)).powi(2);
            }
        }
    }
    total
}

pub fn oracle_do_meteor_var(r: &GenerationRecord) -> f64 {
    let d = &r.dropout.as_ref().unwrap().samples;
    let mut total = 0.0;
    let mut n = 0.0;
    for i in 0..d.len() {
        for j in 0..d.len() {
            if i != j {
                total += meteor_oracle(&d[i].text, &d[j].text);
                n += 1.0;
            }
        }
    }
    total / n
}

pub fn oracle_do_kl_div(r: &GenerationRecord) -> f64 {
    let aligned = r.dropout.as_ref().unwrap().aligned_distributions.as_ref().unwrap();
    let n = aligned.len() as f64;
    let positions = r.hypothesis.tokens.len();
    let mut total = 0.0;
    for inst in aligned {
        let mut kl_sum = 0.0;
        for t in 0..positions {
            let p = &inst[t];
            for (id, pv) in p.token_ids.iter().zip(&p.probs) {
                if *pv == 0.0 {
                    continue;
                }
                let mean: f64 = aligned.iter().map(|other| other[t].prob_of(*id)).sum::<f64>() / n;
                kl_sum += pv * (pv / mean).ln();
            }
        }
        total += kl_sum / positions as f64;
    }
    total
}

pub fn oracle_cocoa(r: &GenerationRecord, base: &str) -> f64 {
    let lp = oracle_avg_tok_prob(r);
    let u = match base {
        "msp" => 1.0 - lp.exp(),
        "mte" => oracle_avg_tok_ent(r),
        "ppl" => (-lp).exp() - 1.0,
        _ => unreachable!(),
    };
    let d = &r.dropout.as_ref().unwrap().samples;
    let dis: f64 = d
        .iter()
        .map(|s| 1.0 - chrf_oracle(&r.hypothesis.text, &[s.text.clone()], 2.0))
        .sum::<f64>()
        / d.len() as f64;
    u * dis
}

pub fn oracle_metric(name: &str, r: &GenerationRecord) -> f64 {
    match name {
        "avg_tok_prob" => oracle_avg_tok_prob(r),
        "avg_tok_ent" => oracle_avg_tok_ent(r),
        "do_ent" => oracle_do_ent(r),
        "bs_imp_wt" => oracle_bs_imp_wt(r),
        "bs_ratios" => oracle_bs_ratios(r),
        "bs_sums" => oracle_bs_sums(r),
        "do_bleu_var" => oracle_do_bleu_var(r),
        "do_kl_div" => oracle_do_kl_div(r),
        "do_meteor_var" => oracle_do_meteor_var(r),
        "cocoa_msp" => oracle_cocoa(r, "msp"),
        "cocoa_mte" => oracle_cocoa(r, "mte"),
        "cocoa_ppl" => oracle_cocoa(r, "ppl"),
        other => panic!("no oracle for {other}"),
    }
}

// ---------------------------------------------------------------------------
// Random records

const WORDS: [&str; 9] = ["the", "cat", "sat", "on", "a", "mat", "dog", "ran", "home."];

pub fn key(epoch: u32, seed: i64) -> CheckpointKey {
    CheckpointKey {
        model_name: "m".into(),
        task_name: "t".into(),
        epoch,
        seed,
        n_train_samples: None,
    }
}

fn random_sequence(rng: &mut ChaCha8Rng, len: usize) -> SequenceEvidence {
    let tokens: Vec<String> = (0..len).map(|_| WORDS[rng.random_range(0..WORDS.len())].to_string()).collect();
    let logprobs: Vec<f64> = (0..len).map(|_| -rng.random_range(0.01..3.0)).collect();
    let ent: Vec<f64> = (0..len).map(|_| rng.random_range(0.0..4.0)).collect();
    SequenceEvidence::new(tokens.join(" "), tokens, logprobs, Some(ent))
}

fn random_distribution(rng: &mut ChaCha8Rng) -> Distribution {
    let k = rng.random_range(1..=4);
    let mut ids: Vec<u32> = Vec::new();
    while ids.len() < k {
        let id = rng.random_range(0..6);
        if !ids.contains(&id) {
            ids.push(id);
        }
    }
    let w: Vec<f64> = (0..k).map(|_| rng.random_range(0.05..1.0)).collect();
    let z: f64 = w.iter().sum();
    Distribution::new(ids, w.iter().map(|x| x / z).collect())
}

/// A valid record with at most 10 tokens, 2..=4 dropout decodes and 2..=10 beams.
pub fn random_record(rng: &mut ChaCha8Rng, idx: usize) -> GenerationRecord {
    let len = rng.random_range(1..=10);
    let hypothesis = random_sequence(rng, len);
    let mut beams: Vec<SequenceEvidence> = (0..rng.random_range(2..=10))
        .map(|_| {
            let l = rng.random_range(1..=10);
            random_sequence(rng, l)
        })
        .collect();
    beams.sort_by(|a, b| b.joint_logprob.partial_cmp(&a.joint_logprob).unwrap());
    let n_drop = rng.random_range(2..=4);
    let samples: Vec<SequenceEvidence> = (0..n_drop)
        .map(|_| {
            let l = rng.random_range(1..=10);
            random_sequence(rng, l)
        })
        .collect();
    let aligned: Vec<Vec<Distribution>> = (0..n_drop)
        .map(|_| (0..len).map(|_| random_distribution(rng)).collect())
        .collect();
    let mut rec = GenerationRecord {
        sample_id: format!("r{idx}"),
        checkpoint: key(0, 0),
        input_text: "q".into(),
        references: vec![random_sequence(rng, 5).text],
        hypothesis,
        beams: Some(BeamSet::from(beams)),
        dropout: Some(DropoutSet {
            samples,
            aligned_distributions: Some(aligned),
        }),
        correctness_label: Some(rng.random_bool(0.5)),
        embedding: None,
        train_similarity: None,
    };
    rec.validate(n_drop).expect("generated record is valid");
    rec
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
