//! Experiment orchestration: desk corpus, trimming, configuration and runs.

pub mod config;
pub mod corpus;
pub mod experiment;
pub mod trim;

pub use config::{AugmentConfig, CorpusConfig, EvalConfig, ExperimentConfig, SpoofSource, SynthesisConfig, SystemSpec};
pub use corpus::{gen_desk_corpus, synth_utterance};
pub use experiment::{aggregate, resolve_out_dir, run_experiment, score_eval_sets, select, MeanRow, Report, RunResult};
pub use trim::{trim_nonspeech, DEFAULT_GATE_DB};
