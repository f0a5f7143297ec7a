//! Experiment configuration, read from TOML.
//!
//! ```toml
//! seed = 2024
//! out_dir = "runs/desk"
//!
//! [corpus]
//! n_trials = 200
//! # manifest = "data/bonafide.tsv"
//!
//! [synthesis]
//! channels = ["gl-mel80", "gl-mel20", "phase-random", "lpc16"]
//! roundtrip_rate = 24000
//!
//! [train]
//! lr0 = 1e-3
//! seeds = [1, 2, 3]
//!
//! [eval]
//! trim_gate_db = 40.0
//!
//! [[systems]]
//! name = "ce_cf_paired"
//! loss_mode = "ce+cf"
//! aug_views = 1
//! ```

use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::augment::{AugmentKind, AugmentPlan};
use crate::contrastive::PairingMode;
use crate::copy_synth::VocoderChannel;
use crate::error::{Error, Result};
use crate::model::{LossMode, TrainConfig};
use crate::seed::derive_seed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusConfig {
    /// Size of the generated desk corpus.
    pub n_trials: usize,
    /// Existing bona fide manifest; replaces the generated corpus.
    pub manifest: Option<PathBuf>,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            n_trials: 200,
            manifest: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthesisConfig {
    pub channels: Vec<String>,
    /// Intermediate rate of the roundtrip training data.
    pub roundtrip_rate: u32,
}

impl Default for SynthesisConfig {
    fn default() -> Self {
        Self {
            channels: ["gl-mel80", "gl-mel20", "phase-random", "lpc16"].map(String::from).to_vec(),
            roundtrip_rate: 24000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    pub ops: Vec<AugmentKind>,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            ops: AugmentPlan::standard(0).ops,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub trim_gate_db: f64,
    /// Also score the eval set with non-speech edges trimmed.
    pub trimmed: bool,
    pub alpha: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            trim_gate_db: crate::harness::DEFAULT_GATE_DB,
            trimmed: true,
            alpha: crate::stats::DEFAULT_ALPHA,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SpoofSource {
    /// Spoofs synthesized at the corpus rate.
    Native,
    /// Spoofs synthesized at `roundtrip_rate` and resampled back.
    Roundtrip,
}

/// One trained variant; fields override the `[train]` section.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemSpec {
    pub name: String,
    pub loss_mode: LossMode,
    #[serde(default = "default_pairing")]
    pub pairing: PairingMode,
    #[serde(default)]
    pub aug_views: usize,
    #[serde(default = "default_data")]
    pub data: SpoofSource,
}

fn default_pairing() -> PairingMode {
    PairingMode::Paired
}

fn default_data() -> SpoofSource {
    SpoofSource::Native
}

impl SystemSpec {
    pub fn new(name: &str, loss_mode: LossMode, aug_views: usize, data: SpoofSource) -> Self {
        Self {
            name: name.to_string(),
            loss_mode,
            pairing: PairingMode::Paired,
            aug_views,
            data,
        }
    }

    pub fn train_config(&self, base: &TrainConfig) -> TrainConfig {
        TrainConfig {
            loss_mode: self.loss_mode,
            pairing: self.pairing,
            aug_views: self.aug_views,
            ..base.clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Master seed every random stream is derived from.
    pub seed: u64,
    pub out_dir: Option<PathBuf>,
    pub corpus: CorpusConfig,
    pub synthesis: SynthesisConfig,
    pub augment: AugmentConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub systems: Vec<SystemSpec>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 2024,
            out_dir: None,
            corpus: CorpusConfig::default(),
            synthesis: SynthesisConfig::default(),
            augment: AugmentConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
            systems: vec![
                SystemSpec::new("ce_aug", LossMode::Ce, 1, SpoofSource::Native),
                SystemSpec::new("ce_cf_paired", LossMode::CeCf, 1, SpoofSource::Native),
                SystemSpec::new("ce_matched", LossMode::Ce, 0, SpoofSource::Native),
                SystemSpec::new("ce_roundtrip", LossMode::Ce, 0, SpoofSource::Roundtrip),
            ],
        }
    }
}

impl FromStr for ExperimentConfig {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        text.parse()
            .map_err(|e: Error| match e {
                Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
                other => other,
            })
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.corpus.manifest.is_none() && self.corpus.n_trials < crate::harness::corpus::MIN_TRIALS {
            return Err(Error::Config(format!(
                "corpus.n_trials must be at least {}",
                crate::harness::corpus::MIN_TRIALS
            )));
        }
        if self.synthesis.channels.is_empty() {
            return Err(Error::Config("synthesis.channels is empty".into()));
        }
        self.channels()?;
        self.roundtrip_channels()?;
        self.train.validate()?;
        if !(self.eval.alpha > 0.0 && self.eval.alpha < 1.0) {
            return Err(Error::Config("eval.alpha must lie in (0, 1)".into()));
        }
        if self.systems.is_empty() {
            return Err(Error::Config("no systems configured".into()));
        }
        let mut names: Vec<&str> = self.systems.iter().map(|s| s.name.as_str()).collect();
        names.sort();
        names.dedup();
        if names.len() != self.systems.len() {
            return Err(Error::Config("system names must be unique".into()));
        }
        for s in &self.systems {
            if s.name.is_empty() || !s.name.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-') {
                return Err(Error::Config(format!("bad system name {:?}", s.name)));
            }
            s.train_config(&self.train).validate()?;
            let tc = s.train_config(&self.train);
            if tc.loss_mode == LossMode::CeCf && tc.spoofs_per_batch > self.synthesis.channels.len() {
                return Err(Error::Config(format!(
                    "{}: spoofs_per_batch = {} exceeds the {} synthesis channels",
                    s.name,
                    tc.spoofs_per_batch,
                    self.synthesis.channels.len()
                )));
            }
            if s.aug_views > 0 && self.augment.ops.is_empty() {
                return Err(Error::Config(format!("{} uses augmented views but augment.ops is empty", s.name)));
            }
        }
        self.augment_plan().validate()
    }

    /// Channels with stochastic streams keyed from the master seed unless
    /// the entry pins its own seed (`name:seed`).
    pub fn channels(&self) -> Result<Vec<VocoderChannel>> {
        self.synthesis
            .channels
            .iter()
            .map(|s| {
                let ch: VocoderChannel = s.parse()?;
                Ok(if s.contains(':') {
                    ch
                } else {
                    ch.reseeded(derive_seed(self.seed, &["channel", &ch.name()]))
                })
            })
            .collect()
    }

    pub fn roundtrip_channels(&self) -> Result<Vec<VocoderChannel>> {
        let rate = self.synthesis.roundtrip_rate;
        let out: Vec<VocoderChannel> = self.channels()?.into_iter().map(|c| c.via_rate(rate)).collect();
        out.iter().try_for_each(VocoderChannel::validate)?;
        Ok(out)
    }

    pub fn augment_plan(&self) -> AugmentPlan {
        AugmentPlan {
            ops: self.augment.ops.clone(),
            master_seed: derive_seed(self.seed, &["augment"]),
        }
    }

    pub fn corpus_seed(&self) -> u64 {
        derive_seed(self.seed, &["corpus"])
    }

    /// Initialization and batching seed of training run `s`; shared by all
    /// systems so they differ only in their configuration.
    pub fn run_seed(&self, s: u64) -> u64 {
        derive_seed(self.seed, &["train", &s.to_string()])
    }

    pub fn hash(&self) -> String {
        use sha2::{Digest, Sha256};
        let json = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }
}
