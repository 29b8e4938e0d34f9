//! Confidence metrics over recorded model generations, and tools to study how
//! well they track output quality across fine-tuning checkpoints.
//!
//! * [`records`]: the JSONL generation-record format and its validation.
//! * [`textsim`]: quality metrics (chrF+, token F1, exact match) and the
//!   pairwise similarities used by consistency metrics.
//! * [`confidence`]: twelve confidence metrics and per-record scoring.
//! * [`stats`]: Spearman correlation, ANOVA with Holm correction, AUROC.
//! * [`dynamics`]: quadrant and sample-pair analyses between two checkpoints.
//! * [`synth`]: synthetic record generator with known ground truth.
//! * [`report`] and [`cli`]: report files and the `confdyn` command line.

pub mod cli;
pub mod confidence;
pub mod dynamics;
pub mod records;
pub mod report;
pub mod stats;
pub mod synth;
pub mod textsim;

pub use confidence::{Metric, ScoreConfig, ScoreTable};
pub use records::{CheckpointKey, GenerationRecord};
pub use textsim::QualityMetric;

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/records.md")]
    mod records {}
    #[doc = include_str!("../../../book/src/quality.md")]
    mod quality {}
    #[doc = include_str!("../../../book/src/confidence.md")]
    mod confidence {}
    #[doc = include_str!("../../../book/src/correlation.md")]
    mod correlation {}
    #[doc = include_str!("../../../book/src/dynamics.md")]
    mod dynamics {}
    #[doc = include_str!("../../../book/src/detection.md")]
    mod detection {}
    #[doc = include_str!("../../../book/src/synth.md")]
    mod synth {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
