//! Generation records: the data model every analysis consumes.
//!
//! A record file is line-delimited JSON. The first non-blank line is a header
//! object carrying `schema_version`; every following line is one
//! [`GenerationRecord`]. Token log-probabilities and entropies are in nats.
//!
//! Ingestion enforces the record invariants (length agreement, joint
//! log-probability consistency, beam ordering, dropout counts, distribution
//! sanity) and renormalizes the truncated top-K token distributions so each
//! sums to one.

use std::cmp::Ordering;
use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const SCHEMA_VERSION: u32 = 1;
pub const DEFAULT_N_DROPOUT: usize = 3;

/// Allowed gap between `joint_logprob` and the sum of token log-probabilities.
pub const JOINT_LOGPROB_TOL: f64 = 1e-6;
/// Allowed excess of a stored distribution's mass over 1 before renormalization.
pub const PROB_MASS_TOL: f64 = 1e-6;

/// Identifies the run and fine-tuning state a record was generated at.
///
/// Epoch 0 is the model before any supervised fine-tuning.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CheckpointKey {
    #[serde(rename = "model")]
    pub model_name: String,
    #[serde(rename = "task")]
    pub task_name: String,
    pub epoch: u32,
    pub seed: i64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_train_samples: Option<u64>,
}

impl CheckpointKey {
    /// Everything except the epoch.
    pub fn run(&self) -> RunKey {
        RunKey {
            model_name: self.model_name.clone(),
            task_name: self.task_name.clone(),
            seed: self.seed,
            n_train_samples: self.n_train_samples,
        }
    }

    pub fn label(&self) -> String {
        let mut s = format!(
            "{}/{}/seed={}/epoch={}",
            self.model_name, self.task_name, self.seed, self.epoch
        );
        if let Some(n) = self.n_train_samples {
            s.push_str(&format!("/n={n}"));
        }
        s
    }
}

// Runs sort together, epochs ascending within a run.
impl Ord for CheckpointKey {
    fn cmp(&self, other: &Self) -> Ordering {
        (
            &self.model_name,
            &self.task_name,
            self.n_train_samples,
            self.seed,
            self.epoch,
        )
            .cmp(&(
                &other.model_name,
                &other.task_name,
                other.n_train_samples,
                other.seed,
                other.epoch,
            ))
    }
}

impl PartialOrd for CheckpointKey {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// A checkpoint key with the epoch dropped: one fine-tuning trajectory.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct RunKey {
    #[serde(rename = "model")]
    pub model_name: String,
    #[serde(rename = "task")]
    pub task_name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_train_samples: Option<u64>,
    pub seed: i64,
}

/// Truncated categorical distribution over token ids at one decode position.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Distribution {
    pub token_ids: Vec<u32>,
    pub probs: Vec<f64>,
}

impl Distribution {
    pub fn new(token_ids: Vec<u32>, probs: Vec<f64>) -> Self {
        Self { token_ids, probs }
    }

    /// Checks the stored mass and rescales it to sum to one.
    pub fn normalize(&mut self) -> Result<(), Violation> {
        if self.token_ids.len() != self.probs.len() {
            return Err(Violation::DistributionLength {
                ids: self.token_ids.len(),
                probs: self.probs.len(),
            });
        }
        if self.probs.is_empty() {
            return Err(Violation::EmptyDistribution);
        }
        let mut seen = HashSet::with_capacity(self.token_ids.len());
        for id in &self.token_ids {
            if !seen.insert(*id) {
                return Err(Violation::DuplicateTokenId(*id));
            }
        }
        if let Some(p) = self.probs.iter().find(|p| !p.is_finite() || **p < 0.0 || **p > 1.0) {
            return Err(Violation::ProbabilityRange(*p));
        }
        let mass: f64 = self.probs.iter().sum();
        if mass > 1.0 + PROB_MASS_TOL || mass <= 0.0 {
            return Err(Violation::ProbabilityMass(mass));
        }
        for p in &mut self.probs {
            *p /= mass;
        }
        Ok(())
    }

    pub fn prob_of(&self, token_id: u32) -> f64 {
        self.token_ids
            .iter()
            .position(|t| *t == token_id)
            .map_or(0.0, |i| self.probs[i])
    }
}

/// One decoded sequence with its token-level evidence.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SequenceEvidence {
    pub text: String,
    pub tokens: Vec<String>,
    pub token_logprobs: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub token_entropies: Option<Vec<f64>>,
    pub joint_logprob: f64,
}

impl SequenceEvidence {
    /// Builds a sequence whose joint log-probability is the sum of its tokens'.
    pub fn new(
        text: impl Into<String>,
        tokens: Vec<String>,
        token_logprobs: Vec<f64>,
        token_entropies: Option<Vec<f64>>,
    ) -> Self {
        let joint_logprob = token_logprobs.iter().sum();
        Self {
            text: text.into(),
            tokens,
            token_logprobs,
            token_entropies,
            joint_logprob,
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn check(&self) -> Result<(), Violation> {
        if self.tokens.len() != self.token_logprobs.len() {
            return Err(Violation::LogprobCount {
                tokens: self.tokens.len(),
                logprobs: self.token_logprobs.len(),
            });
        }
        if let Some(lp) = self
            .token_logprobs
            .iter()
            .find(|lp| !lp.is_finite() || **lp > 0.0)
        {
            return Err(Violation::LogprobRange(*lp));
        }
        if let Some(ent) = &self.token_entropies {
            if ent.len() != self.tokens.len() {
                return Err(Violation::EntropyCount {
                    tokens: self.tokens.len(),
                    entropies: ent.len(),
                });
            }
            if let Some(h) = ent.iter().find(|h| !h.is_finite() || **h < 0.0) {
                return Err(Violation::EntropyRange(*h));
            }
        }
        if !self.joint_logprob.is_finite() || self.joint_logprob > 0.0 {
            return Err(Violation::LogprobRange(self.joint_logprob));
        }
        let sum: f64 = self.token_logprobs.iter().sum();
        if (sum - self.joint_logprob).abs() > JOINT_LOGPROB_TOL {
            return Err(Violation::JointLogprob {
                joint: self.joint_logprob,
                sum,
            });
        }
        Ok(())
    }
}

/// Beam-search candidates, best first.
///
/// Serialized as a bare array of sequences; `importance_weights` is derived
/// by the confidence metrics and never stored in record files.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(from = "Vec<SequenceEvidence>", into = "Vec<SequenceEvidence>")]
pub struct BeamSet {
    pub beams: Vec<SequenceEvidence>,
    pub importance_weights: Option<Vec<f64>>,
}

impl From<Vec<SequenceEvidence>> for BeamSet {
    fn from(beams: Vec<SequenceEvidence>) -> Self {
        Self {
            beams,
            importance_weights: None,
        }
    }
}

impl From<BeamSet> for Vec<SequenceEvidence> {
    fn from(set: BeamSet) -> Self {
        set.beams
    }
}

impl BeamSet {
    pub fn len(&self) -> usize {
        self.beams.len()
    }

    pub fn is_empty(&self) -> bool {
        self.beams.is_empty()
    }

    fn check(&self) -> Result<(), Violation> {
        for (i, beam) in self.beams.iter().enumerate() {
            beam.check().map_err(|v| Violation::Beam(i, Box::new(v)))?;
        }
        for (i, w) in self.beams.windows(2).enumerate() {
            if w[1].joint_logprob > w[0].joint_logprob {
                return Err(Violation::BeamOrder(i + 1));
            }
        }
        Ok(())
    }
}

/// Free-running dropout decodes plus, optionally, per-instance distributions
/// force-decoded along the primary hypothesis.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DropoutSet {
    pub samples: Vec<SequenceEvidence>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub aligned_distributions: Option<Vec<Vec<Distribution>>>,
}

impl DropoutSet {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// Everything recorded for one test sample at one checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerationRecord {
    pub sample_id: String,
    pub checkpoint: CheckpointKey,
    pub input_text: String,
    pub references: Vec<String>,
    pub hypothesis: SequenceEvidence,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub beams: Option<BeamSet>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dropout: Option<DropoutSet>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub correctness_label: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub embedding: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train_similarity: Option<f64>,
}

impl GenerationRecord {
    /// Enforces the record invariants and renormalizes aligned distributions.
    pub fn validate(&mut self, n_dropout: usize) -> Result<(), Violation> {
        if self.sample_id.is_empty() {
            return Err(Violation::EmptySampleId);
        }
        if self.references.is_empty() {
            return Err(Violation::NoReferences);
        }
        self.hypothesis.check().map_err(|v| Violation::Hypothesis(Box::new(v)))?;
        if let Some(beams) = &self.beams {
            beams.check()?;
        }
        if let Some(dropout) = &mut self.dropout {
            if dropout.samples.len() != n_dropout {
                return Err(Violation::DropoutCount {
                    expected: n_dropout,
                    found: dropout.samples.len(),
                });
            }
            for (i, s) in dropout.samples.iter().enumerate() {
                s.check().map_err(|v| Violation::DropoutSample(i, Box::new(v)))?;
            }
            if let Some(aligned) = &mut dropout.aligned_distributions {
                if aligned.len() != dropout.samples.len() {
                    return Err(Violation::AlignedCount {
                        samples: dropout.samples.len(),
                        aligned: aligned.len(),
                    });
                }
                let positions = self.hypothesis.len();
                for (i, per_instance) in aligned.iter_mut().enumerate() {
                    if per_instance.len() != positions {
                        return Err(Violation::AlignedLength {
                            instance: i,
                            expected: positions,
                            found: per_instance.len(),
                        });
                    }
                    for (t, dist) in per_instance.iter_mut().enumerate() {
                        dist.normalize().map_err(|v| Violation::Aligned {
                            instance: i,
                            position: t,
                            inner: Box::new(v),
                        })?;
                    }
                }
            }
        }
        if let Some(e) = &self.embedding {
            if e.iter().any(|x| !x.is_finite()) {
                return Err(Violation::NonFiniteEmbedding);
            }
        }
        if let Some(s) = self.train_similarity {
            if !(-1.0..=1.0).contains(&s) {
                return Err(Violation::SimilarityRange(s));
            }
        }
        Ok(())
    }
}

/// File header: the first JSON object in a record file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FileHeader {
    pub schema_version: u32,
    /// Truncation K the exporter applied to stored distributions.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub distribution_top_k: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_dropout: Option<usize>,
    #[serde(flatten)]
    pub extra: serde_json::Map<String, serde_json::Value>,
}

impl Default for FileHeader {
    fn default() -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            distribution_top_k: None,
            n_dropout: None,
            extra: serde_json::Map::new(),
        }
    }
}

/// A single invariant a record failed.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Violation {
    #[error("sample_id is empty")]
    EmptySampleId,
    #[error("references must be non-empty")]
    NoReferences,
    #[error("{tokens} tokens but {logprobs} token_logprobs")]
    LogprobCount { tokens: usize, logprobs: usize },
    #[error("{tokens} tokens but {entropies} token_entropies")]
    EntropyCount { tokens: usize, entropies: usize },
    #[error("log-probability {0} is not a finite value <= 0")]
    LogprobRange(f64),
    #[error("entropy {0} is not a finite value >= 0")]
    EntropyRange(f64),
    #[error("joint_logprob {joint} differs from token logprob sum {sum}")]
    JointLogprob { joint: f64, sum: f64 },
    #[error("hypothesis: {0}")]
    Hypothesis(Box<Violation>),
    #[error("beam {0}: {1}")]
    Beam(usize, Box<Violation>),
    #[error("beam {0} has a higher joint_logprob than the beam before it")]
    BeamOrder(usize),
    #[error("expected {expected} dropout samples, found {found}")]
    DropoutCount { expected: usize, found: usize },
    #[error("dropout sample {0}: {1}")]
    DropoutSample(usize, Box<Violation>),
    #[error("{samples} dropout samples but {aligned} aligned distribution lists")]
    AlignedCount { samples: usize, aligned: usize },
    #[error("aligned distributions for instance {instance}: expected {expected} positions, found {found}")]
    AlignedLength {
        instance: usize,
        expected: usize,
        found: usize,
    },
    #[error("aligned distribution (instance {instance}, position {position}): {inner}")]
    Aligned {
        instance: usize,
        position: usize,
        inner: Box<Violation>,
    },
    #[error("{ids} token_ids but {probs} probs")]
    DistributionLength { ids: usize, probs: usize },
    #[error("distribution is empty")]
    EmptyDistribution,
    #[error("token id {0} appears twice")]
    DuplicateTokenId(u32),
    #[error("probability {0} outside [0, 1]")]
    ProbabilityRange(f64),
    #[error("probability mass {0} is not in (0, 1]")]
    ProbabilityMass(f64),
    #[error("embedding contains a non-finite value")]
    NonFiniteEmbedding,
    #[error("train_similarity {0} outside [-1, 1]")]
    SimilarityRange(f64),
    #[error("duplicate sample_id {sample_id:?} within checkpoint {checkpoint}")]
    DuplicateSampleId {
        sample_id: String,
        checkpoint: String,
    },
    #[error("malformed JSON: {0}")]
    Json(String),
}

#[derive(Debug, Error)]
pub enum RecordsError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {violation}")]
    Invalid { line: usize, violation: Violation },
    #[error("missing header line with \"schema_version\"")]
    MissingHeader,
    #[error("line {line}: invalid header: {message}")]
    BadHeader { line: usize, message: String },
    #[error("unsupported schema_version {0} (expected {SCHEMA_VERSION})")]
    UnsupportedSchema(u32),
    #[error("cannot pair {a} with {b}: run fields differ")]
    RunMismatch { a: String, b: String },
    #[error("cannot pair two groups at the same epoch {0}")]
    SameEpoch(u32),
    #[error("{0}")]
    Serialize(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strictness {
    #[default]
    Strict,
    Lenient,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct LoadOptions {
    pub strictness: Strictness,
    /// Expected dropout sample count; falls back to the header, then 3.
    pub n_dropout: Option<usize>,
}

impl LoadOptions {
    pub fn strict() -> Self {
        Self::default()
    }

    pub fn lenient() -> Self {
        Self {
            strictness: Strictness::Lenient,
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LineViolation {
    pub line: usize,
    pub violation: Violation,
}

#[derive(Debug, Clone)]
pub struct LoadedRecords {
    pub header: FileHeader,
    pub records: Vec<GenerationRecord>,
    /// Records dropped in lenient mode.
    pub skipped: usize,
    pub violations: Vec<LineViolation>,
}

/// Reads and validates a record file.
///
/// Strict mode aborts on the first violation with its line number; lenient
/// mode skips offending lines and reports them in
/// [`LoadedRecords::violations`]. A missing or malformed header is fatal in
/// both modes.
pub fn load_records(path: &Path, options: LoadOptions) -> Result<LoadedRecords, RecordsError> {
    let file = File::open(path).map_err(|source| RecordsError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    read_records(BufReader::new(file), options).map_err(|e| match e {
        RecordsError::Io { source, .. } => RecordsError::Io {
            path: path.to_path_buf(),
            source,
        },
        other => other,
    })
}

pub fn read_records<R: BufRead>(reader: R, options: LoadOptions) -> Result<LoadedRecords, RecordsError> {
    let mut header: Option<FileHeader> = None;
    let mut records = Vec::new();
    let mut violations = Vec::new();
    let mut skipped = 0;
    let mut seen: HashSet<(CheckpointKey, String)> = HashSet::new();
    let mut n_dropout = options.n_dropout.unwrap_or(DEFAULT_N_DROPOUT);

    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(|source| RecordsError::Io {
            path: PathBuf::new(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        if header.is_none() {
            let h = parse_header(&line, line_no)?;
            if options.n_dropout.is_none() {
                if let Some(n) = h.n_dropout {
                    n_dropout = n;
                }
            }
            header = Some(h);
            continue;
        }

        let parsed = serde_json::from_str::<GenerationRecord>(&line)
            .map_err(|e| Violation::Json(e.to_string()))
            .and_then(|mut rec| {
                rec.validate(n_dropout)?;
                let key = (rec.checkpoint.clone(), rec.sample_id.clone());
                if seen.contains(&key) {
                    return Err(Violation::DuplicateSampleId {
                        sample_id: rec.sample_id.clone(),
                        checkpoint: rec.checkpoint.label(),
                    });
                }
                seen.insert(key);
                Ok(rec)
            });

        match parsed {
            Ok(rec) => records.push(rec),
            Err(violation) => match options.strictness {
                Strictness::Strict => {
                    return Err(RecordsError::Invalid {
                        line: line_no,
                        violation,
                    })
                }
                Strictness::Lenient => {
                    skipped += 1;
                    violations.push(LineViolation {
                        line: line_no,
                        violation,
                    });
                }
            },
        }
    }

    let header = header.ok_or(RecordsError::MissingHeader)?;
    Ok(LoadedRecords {
        header,
        records,
        skipped,
        violations,
    })
}

fn parse_header(line: &str, line_no: usize) -> Result<FileHeader, RecordsError> {
    let value: serde_json::Value = serde_json::from_str(line).map_err(|e| RecordsError::BadHeader {
        line: line_no,
        message: e.to_string(),
    })?;
    if value.get("schema_version").is_none() {
        return Err(RecordsError::MissingHeader);
    }
    let header: FileHeader = serde_json::from_value(value).map_err(|e| RecordsError::BadHeader {
        line: line_no,
        message: e.to_string(),
    })?;
    if header.schema_version != SCHEMA_VERSION {
        return Err(RecordsError::UnsupportedSchema(header.schema_version));
    }
    Ok(header)
}

/// Writes a header line followed by one line per record.
pub fn write_records<W: Write>(
    mut out: W,
    header: &FileHeader,
    records: &[GenerationRecord],
) -> Result<(), RecordsError> {
    let io = |source| RecordsError::Io {
        path: PathBuf::new(),
        source,
    };
    serde_json::to_writer(&mut out, header)?;
    out.write_all(b"\n").map_err(io)?;
    for rec in records {
        serde_json::to_writer(&mut out, rec)?;
        out.write_all(b"\n").map_err(io)?;
    }
    out.flush().map_err(io)
}

/// Partitions records by checkpoint, keeping input order inside each group.
pub fn group_by_checkpoint(
    records: Vec<GenerationRecord>,
) -> BTreeMap<CheckpointKey, Vec<GenerationRecord>> {
    let mut groups: BTreeMap<CheckpointKey, Vec<GenerationRecord>> = BTreeMap::new();
    for rec in records {
        groups.entry(rec.checkpoint.clone()).or_default().push(rec);
    }
    groups
}

/// Records of one sample matched across two checkpoints of the same run.
#[derive(Debug, Clone)]
pub struct CheckpointPairing<'a> {
    pub from: CheckpointKey,
    pub to: CheckpointKey,
    pub pairs: Vec<(&'a GenerationRecord, &'a GenerationRecord)>,
    pub only_in_from: Vec<String>,
    pub only_in_to: Vec<String>,
}

/// Two checkpoints can be compared when they share a run and differ in epoch.
pub fn check_pairable(a: &CheckpointKey, b: &CheckpointKey) -> Result<(), RecordsError> {
    if a.run() != b.run() {
        return Err(RecordsError::RunMismatch {
            a: a.label(),
            b: b.label(),
        });
    }
    if a.epoch == b.epoch {
        return Err(RecordsError::SameEpoch(a.epoch));
    }
    Ok(())
}

/// Matches samples of two groups by `sample_id`.
///
/// The groups must belong to the same run (model, task, seed, sample count)
/// and differ in epoch. Pairs follow the order of `from`.
pub fn pair_checkpoints<'a>(
    from: (&CheckpointKey, &'a [GenerationRecord]),
    to: (&CheckpointKey, &'a [GenerationRecord]),
) -> Result<CheckpointPairing<'a>, RecordsError> {
    let (key_a, recs_a) = from;
    let (key_b, recs_b) = to;
    check_pairable(key_a, key_b)?;
    let index_b: HashMap<&str, &GenerationRecord> =
        recs_b.iter().map(|r| (r.sample_id.as_str(), r)).collect();
    let ids_a: HashSet<&str> = recs_a.iter().map(|r| r.sample_id.as_str()).collect();

    let mut pairs = Vec::new();
    let mut only_in_from = Vec::new();
    for rec in recs_a {
        match index_b.get(rec.sample_id.as_str()) {
            Some(other) => pairs.push((rec, *other)),
            None => only_in_from.push(rec.sample_id.clone()),
        }
    }
    let only_in_to = recs_b
        .iter()
        .filter(|r| !ids_a.contains(r.sample_id.as_str()))
        .map(|r| r.sample_id.clone())
        .collect();

    Ok(CheckpointPairing {
        from: key_a.clone(),
        to: key_b.clone(),
        pairs,
        only_in_from,
        only_in_to,
    })
}
