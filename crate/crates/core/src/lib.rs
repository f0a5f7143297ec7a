//! Spoofed-speech generation by DSP copy-synthesis, a small countermeasure
//! trained with cross-entropy and an optional contrastive feature loss over
//! paired bona fide/vocoded batches, and EER-based evaluation.
//!
//! The `harness` module ties the pieces into one seeded experiment; the
//! `vocspoof` binary exposes each stage on the command line.

pub mod augment;
pub mod contrastive;
pub mod copy_synth;
pub mod dsp;
pub mod error;
pub mod harness;
pub mod manifest;
pub mod metrics;
pub mod model;
pub mod seed;
pub mod stats;

pub use augment::{AugmentKind, AugmentPlan};
pub use contrastive::{BatchComposition, CfConfig, CfLevels, FeatureSequence, PairingMode};
pub use copy_synth::{PairedTrialSet, VocoderChannel};
pub use dsp::Waveform;
pub use error::{Error, ErrorClass, Result};
pub use harness::{ExperimentConfig, Report, SystemSpec};
pub use manifest::{Label, Subset, TrialManifest, TrialRecord};
pub use metrics::{EerResult, ScoreEntry, ScoreSet};
pub use model::{Checkpoint, CmModel, LossMode, ModelParams, TrainConfig};
pub use stats::SignificanceMatrix;
