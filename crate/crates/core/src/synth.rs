//! Synthetic generation records with analytically known structure.
//!
//! Each sample has a fixed reference of `sentence_len` vocabulary words. At
//! every epoch its hypothesis is the reference with `n_wrong` positions
//! replaced by out-of-vocabulary tokens, always taken from the same
//! per-sample position order, so token F1 against the reference is exactly
//! `1 - n_wrong / sentence_len`. How `n_wrong` and the model's
//! probabilities evolve across epochs is set by the [`DriftModel`]:
//!
//! * `none`: quality is frozen; confidence wanders with `noise_scale`.
//! * `uniform_logprob_inflation`: every hypothesis token log-probability
//!   rises by exactly epsilon per epoch while quality takes random steps.
//! * `quality_coupled`: all probability evidence is a fixed strictly
//!   monotone function of quality, so aligned probability metrics rank
//!   samples exactly as token F1 does.
//! * `similarity_coupled`: confidence rises with a per-sample similarity to
//!   the training set, scaled by beta.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Binomial, Distribution as _, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::records::{
    BeamSet, CheckpointKey, Distribution, DropoutSet, FileHeader, GenerationRecord, RunKey,
    SequenceEvidence, SCHEMA_VERSION,
};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DriftModel {
    None,
    UniformLogprobInflation { epsilon: f64 },
    QualityCoupled,
    SimilarityCoupled { beta: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSpec {
    pub n_samples: usize,
    /// Checkpoints per run; epochs are numbered 0..n_epochs.
    pub n_epochs: u32,
    pub seeds: Vec<i64>,
    pub vocab_size: usize,
    pub drift: DriftModel,
    pub noise_scale: f64,
    pub sentence_len: usize,
    pub n_dropout: usize,
    pub n_beams: usize,
    pub top_k: usize,
    pub embedding_dim: usize,
    pub model: String,
    pub task: String,
    pub n_train_samples: Option<u64>,
    /// Generator RNG seed.
    pub rng_seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            n_samples: 100,
            n_epochs: 2,
            seeds: vec![0],
            vocab_size: 200,
            drift: DriftModel::None,
            noise_scale: 0.5,
            sentence_len: 8,
            n_dropout: 3,
            n_beams: 10,
            top_k: 5,
            embedding_dim: 8,
            model: "synth".into(),
            task: "qa".into(),
            n_train_samples: None,
            rng_seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum SynthError {
    #[error("invalid synthetic spec: {0}")]
    Invalid(String),
}

impl SynthSpec {
    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: &str| Err(SynthError::Invalid(m.into()));
        if self.n_samples == 0 || self.n_epochs == 0 || self.seeds.is_empty() {
            return bad("n_samples, n_epochs and seeds must be non-empty");
        }
        if self.sentence_len < 2 || self.vocab_size < 2 {
            return bad("sentence_len and vocab_size must be at least 2");
        }
        if self.n_beams == 0 || self.n_dropout == 0 || self.top_k < 2 {
            return bad("n_beams and n_dropout must be positive, top_k at least 2");
        }
        if !(self.noise_scale >= 0.0 && self.noise_scale.is_finite()) {
            return bad("noise_scale must be a finite non-negative number");
        }
        if self.embedding_dim == 0 {
            return bad("embedding_dim must be positive");
        }
        if let DriftModel::UniformLogprobInflation { epsilon } = self.drift {
            if !(epsilon > 0.0 && epsilon.is_finite()) {
                return bad("epsilon must be positive");
            }
        }
        if let DriftModel::SimilarityCoupled { beta } = self.drift {
            if !beta.is_finite() {
                return bad("beta must be finite");
            }
        }
        Ok(())
    }

    pub fn header(&self) -> FileHeader {
        let mut extra = serde_json::Map::new();
        extra.insert("producer".into(), "confdyn synth".into());
        extra.insert(
            "synth_spec".into(),
            serde_json::to_value(self).expect("spec serializes"),
        );
        FileHeader {
            schema_version: SCHEMA_VERSION,
            distribution_top_k: Some(self.top_k),
            n_dropout: Some(self.n_dropout),
            extra,
        }
    }
}

/// Counts of quality movement between adjacent epochs, taken from the
/// generator's own state rather than from scored text.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochTransitionTruth {
    pub run: RunKey,
    pub epoch_from: u32,
    pub epoch_to: u32,
    pub n_samples: usize,
    pub quality_decreased: usize,
    pub quality_increased: usize,
    pub quality_unchanged: usize,
    /// Present for `uniform_logprob_inflation`: the per-token shift.
    pub logprob_shift: Option<f64>,
}

impl EpochTransitionTruth {
    pub fn negative_quality_fraction(&self) -> f64 {
        self.quality_decreased as f64 / self.n_samples as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthTruth {
    pub spec: SynthSpec,
    pub transitions: Vec<EpochTransitionTruth>,
}

#[derive(Debug, Clone)]
pub struct SynthOutput {
    pub header: FileHeader,
    pub records: Vec<GenerationRecord>,
    pub truth: SynthTruth,
}

/// Per-sample state that persists across epochs.
struct SampleState {
    id: String,
    input: String,
    reference: Vec<usize>,
    /// Positions replaced first as `n_wrong` grows.
    wrong_order: Vec<usize>,
    /// Base per-token probability logits (None/similarity drift).
    base_logit: f64,
    token_offsets: Vec<f64>,
    /// Base per-token log-probabilities (inflation drift).
    base_logprobs: Vec<f64>,
    similarity: f64,
    embedding: Vec<f64>,
}

/// Everything one record's probability evidence is derived from.
struct Evidence {
    token_logprobs: Vec<f64>,
    entropies: Vec<f64>,
    /// Gap in joint log-probability between consecutive beams.
    beam_gap: f64,
    /// Chance a dropout decode swaps any given token.
    dropout_swap: f64,
    /// Spread of the aligned distributions around the hypothesis token.
    aligned_jitter: f64,
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Generates every record for every seed and epoch.
pub fn generate(spec: &SynthSpec) -> Result<SynthOutput, SynthError> {
    spec.validate()?;
    let mut records = Vec::new();
    let mut transitions = Vec::new();
    for (run_idx, &seed) in spec.seeds.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.rng_seed.wrapping_mul(1_000_003).wrapping_add(run_idx as u64));
        let run = RunKey {
            model_name: spec.model.clone(),
            task_name: spec.task.clone(),
            n_train_samples: spec.n_train_samples,
            seed,
        };
        let states: Vec<SampleState> = (0..spec.n_samples).map(|i| new_sample(spec, i, &mut rng)).collect();
        let wrong = wrong_counts(spec, &mut rng);
        let mut inflated: Vec<Vec<f64>> = states.iter().map(|s| s.base_logprobs.clone()).collect();

        for epoch in 0..spec.n_epochs {
            let key = CheckpointKey {
                model_name: spec.model.clone(),
                task_name: spec.task.clone(),
                epoch,
                seed,
                n_train_samples: spec.n_train_samples,
            };
            if epoch > 0 {
                if let DriftModel::UniformLogprobInflation { epsilon } = spec.drift {
                    for lps in &mut inflated {
                        for lp in lps.iter_mut() {
                            *lp += epsilon;
                        }
                    }
                }
            }
            for (i, state) in states.iter().enumerate() {
                let n_wrong = wrong[i][epoch as usize];
                let evidence = evidence_for(spec, state, n_wrong, &inflated[i], &mut rng);
                records.push(build_record(spec, &key, state, n_wrong, &evidence, &mut rng));
            }
            if epoch > 0 {
                let (mut dec, mut inc, mut same) = (0, 0, 0);
                for w in &wrong {
                    let (before, after) = (w[epoch as usize - 1], w[epoch as usize]);
                    match after.cmp(&before) {
                        std::cmp::Ordering::Greater => dec += 1,
                        std::cmp::Ordering::Less => inc += 1,
                        std::cmp::Ordering::Equal => same += 1,
                    }
                }
                transitions.push(EpochTransitionTruth {
                    run: run.clone(),
                    epoch_from: epoch - 1,
                    epoch_to: epoch,
                    n_samples: spec.n_samples,
                    quality_decreased: dec,
                    quality_increased: inc,
                    quality_unchanged: same,
                    logprob_shift: match spec.drift {
                        DriftModel::UniformLogprobInflation { epsilon } => Some(epsilon),
                        _ => None,
                    },
                });
            }
        }
    }
    Ok(SynthOutput {
        header: spec.header(),
        records,
        truth: SynthTruth {
            spec: spec.clone(),
            transitions,
        },
    })
}

fn new_sample(spec: &SynthSpec, i: usize, rng: &mut ChaCha8Rng) -> SampleState {
    let len = spec.sentence_len;
    let reference: Vec<usize> = (0..len).map(|_| rng.random_range(0..spec.vocab_size)).collect();
    let mut wrong_order: Vec<usize> = (0..len).collect();
    wrong_order.shuffle(rng);
    let base_logit = rng.random_range(-0.5..2.5);
    let token_offsets: Vec<f64> = (0..len).map(|_| rng.random_range(-0.3..0.3)).collect();
    // Leave room for the full inflation so log-probabilities stay <= 0.
    let headroom = match spec.drift {
        DriftModel::UniformLogprobInflation { epsilon } => epsilon * (spec.n_epochs - 1) as f64,
        _ => 0.0,
    };
    let base_logprobs: Vec<f64> = (0..len)
        .map(|_| rng.random_range(0.3f64..0.95).ln() - headroom)
        .collect();
    let similarity = rng.random_range(-1.0..1.0);
    let embedding: Vec<f64> = (0..spec.embedding_dim)
        .map(|_| rng.sample::<f64, _>(StandardNormal))
        .collect();
    SampleState {
        id: format!("s{i:05}"),
        input: format!("question {i}"),
        reference,
        wrong_order,
        base_logit,
        token_offsets,
        base_logprobs,
        similarity,
        embedding,
    }
}

/// `n_wrong` per sample per epoch.
fn wrong_counts(spec: &SynthSpec, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let len = spec.sentence_len;
    let epochs = spec.n_epochs as usize;
    (0..spec.n_samples)
        .map(|_| {
            let mut w = Vec::with_capacity(epochs);
            w.push(rng.random_range(0..=len));
            for e in 1..epochs {
                let prev = w[e - 1] as i64;
                let next = match spec.drift {
                    DriftModel::None => prev,
                    DriftModel::QualityCoupled => rng.random_range(0..=len) as i64,
                    _ => (prev + rng.random_range(-2..=2)).clamp(0, len as i64),
                };
                w.push(next as usize);
            }
            w
        })
        .collect()
}

fn evidence_for(
    spec: &SynthSpec,
    state: &SampleState,
    n_wrong: usize,
    inflated: &[f64],
    rng: &mut ChaCha8Rng,
) -> Evidence {
    let len = spec.sentence_len as f64;
    match spec.drift {
        DriftModel::QualityCoupled => {
            // Strength is a function of quality only, so equal quality gives
            // bit-identical probability evidence.
            let s = 1.0 - n_wrong as f64 / len;
            let p = 0.35 + 0.6 * s;
            Evidence {
                token_logprobs: vec![p.ln(); spec.sentence_len],
                entropies: vec![2.0 * (1.0 - s) + 0.05; spec.sentence_len],
                beam_gap: 0.3 + 0.5 * s,
                dropout_swap: 0.6 * (1.0 - s),
                aligned_jitter: 0.05 + 0.4 * (1.0 - s),
            }
        }
        DriftModel::UniformLogprobInflation { .. } => {
            let mean_p = inflated.iter().map(|lp| lp.exp()).sum::<f64>() / len;
            Evidence {
                token_logprobs: inflated.to_vec(),
                entropies: inflated.iter().map(|lp| -0.8 * lp + 0.05).collect(),
                beam_gap: 0.2 + 0.6 * mean_p,
                dropout_swap: 0.5 * (1.0 - mean_p),
                aligned_jitter: 0.05 + 0.3 * (1.0 - mean_p),
            }
        }
        DriftModel::None | DriftModel::SimilarityCoupled { .. } => {
            let beta = match spec.drift {
                DriftModel::SimilarityCoupled { beta } => beta,
                _ => 0.0,
            };
            let shift: f64 = spec.noise_scale * rng.sample::<f64, _>(StandardNormal);
            let logit = state.base_logit + beta * state.similarity + shift;
            let token_logprobs: Vec<f64> = state
                .token_offsets
                .iter()
                .map(|o| sigmoid(logit + o).ln())
                .collect();
            let p = sigmoid(logit);
            Evidence {
                entropies: token_logprobs.iter().map(|lp| -0.8 * lp + 0.05).collect(),
                token_logprobs,
                beam_gap: 0.2 + 0.6 * p,
                dropout_swap: 0.5 * (1.0 - p),
                aligned_jitter: 0.05 + 0.3 * (1.0 - p),
            }
        }
    }
}

fn word(id: usize) -> String {
    format!("w{id}")
}

const OOV_BASE: u32 = 1_000_000;

fn build_record(
    spec: &SynthSpec,
    key: &CheckpointKey,
    state: &SampleState,
    n_wrong: usize,
    ev: &Evidence,
    rng: &mut ChaCha8Rng,
) -> GenerationRecord {
    let len = spec.sentence_len;
    let mut hyp_ids: Vec<u32> = state.reference.iter().map(|w| *w as u32).collect();
    for (rank, &pos) in state.wrong_order.iter().take(n_wrong).enumerate() {
        hyp_ids[pos] = OOV_BASE + rank as u32;
    }
    let hyp_tokens: Vec<String> = hyp_ids.iter().map(|id| token_text(*id)).collect();
    let reference_text = state.reference.iter().map(|w| word(*w)).collect::<Vec<_>>().join(" ");
    let hypothesis = SequenceEvidence::new(
        hyp_tokens.join(" "),
        hyp_tokens.clone(),
        ev.token_logprobs.clone(),
        Some(ev.entropies.clone()),
    );

    // Beam b lowers each token's log-probability so the joint drops by b * gap.
    let beams: Vec<SequenceEvidence> = (0..spec.n_beams)
        .map(|b| {
            let mut toks = hyp_tokens.clone();
            if b > 0 {
                let pos = (b - 1) % len;
                toks[pos] = format!("b{b}");
            }
            let per_token = b as f64 * ev.beam_gap / len as f64;
            let lps: Vec<f64> = ev.token_logprobs.iter().map(|lp| lp - per_token).collect();
            SequenceEvidence::new(toks.join(" "), toks, lps, None)
        })
        .collect();

    let swap = Binomial::new(len as u64, ev.dropout_swap.clamp(0.0, 1.0)).expect("valid binomial");
    let samples: Vec<SequenceEvidence> = (0..spec.n_dropout)
        .map(|d| {
            let mut toks = hyp_tokens.clone();
            let n_swaps = swap.sample(rng) as usize;
            let mut positions: Vec<usize> = (0..len).collect();
            positions.shuffle(rng);
            for &pos in positions.iter().take(n_swaps) {
                toks[pos] = format!("d{d}x{}", rng.random_range(0..spec.vocab_size));
            }
            let lps: Vec<f64> = ev
                .token_logprobs
                .iter()
                .map(|lp| lp - 0.05 * n_swaps as f64 / len as f64)
                .collect();
            SequenceEvidence::new(toks.join(" "), toks, lps, Some(ev.entropies.clone()))
        })
        .collect();

    let aligned: Vec<Vec<Distribution>> = (0..spec.n_dropout)
        .map(|_| {
            hyp_ids
                .iter()
                .zip(&ev.token_logprobs)
                .map(|(id, lp)| aligned_distribution(spec, *id, lp.exp(), ev.aligned_jitter, rng))
                .collect()
        })
        .collect();

    let f1 = 1.0 - n_wrong as f64 / len as f64;
    GenerationRecord {
        sample_id: state.id.clone(),
        checkpoint: key.clone(),
        input_text: state.input.clone(),
        references: vec![reference_text],
        hypothesis,
        beams: Some(BeamSet::from(beams)),
        dropout: Some(DropoutSet {
            samples,
            aligned_distributions: Some(aligned),
        }),
        correctness_label: Some(f1 >= 0.75),
        embedding: Some(state.embedding.clone()),
        train_similarity: Some(state.similarity),
    }
}

fn token_text(id: u32) -> String {
    if id >= OOV_BASE {
        format!("oov{}", id - OOV_BASE)
    } else {
        word(id as usize)
    }
}

/// Top-k distribution led by the hypothesis token, truncated so the stored
/// mass is below one (renormalized at ingest).
fn aligned_distribution(spec: &SynthSpec, token: u32, p: f64, jitter: f64, rng: &mut ChaCha8Rng) -> Distribution {
    let lead = (p + jitter * rng.random_range(-1.0..1.0)).clamp(0.05, 0.97);
    let mut ids = vec![token];
    while ids.len() < spec.top_k {
        let candidate = rng.random_range(0..(spec.vocab_size as u32 + spec.top_k as u32));
        if !ids.contains(&candidate) {
            ids.push(candidate);
        }
    }
    let weights: Vec<f64> = (1..spec.top_k).map(|_| rng.random_range(0.1..1.0)).collect();
    let total: f64 = weights.iter().sum();
    let tail = 0.98 * (1.0 - lead);
    let mut probs = vec![lead];
    probs.extend(weights.iter().map(|w| tail * w / total));
    Distribution::new(ids, probs)
}
