//! The countermeasure: a fixed filterbank front end, a trainable frame
//! feature extractor, global average pooling and a classifier head.

mod frontend;
mod network;
mod train;

use std::path::Path;

use ndarray::{Array1, Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::contrastive::FeatureSequence;
use crate::dsp::Waveform;
use crate::error::{Error, Result};

pub use frontend::{Frontend, FrontendConfig, LOG_FLOOR};
pub use network::{
    adam_step, classify, cross_entropy, extract_frames, forward_backward, global_avg_pool, score, AdamConfig,
    AdamState, Affine, CfGroup, LossParts, ModelParams, NetworkConfig, LEAKY_SLOPE,
};
pub use train::{
    load_examples, score_set, train, EarlyStopping, EpochRecord, Example, LossMode, TrainConfig, TrainOutcome,
    TrainingData, history_csv,
};

pub const CHECKPOINT_VERSION: u32 = 1;

/// Per-dimension standardization of front-end features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub mean: Array1<f64>,
    pub std: Array1<f64>,
}

impl Normalizer {
    pub fn identity(dim: usize) -> Self {
        Self {
            mean: Array1::zeros(dim),
            std: Array1::ones(dim),
        }
    }

    /// Mean and standard deviation over every frame of `seqs`.
    pub fn fit<'a>(seqs: impl IntoIterator<Item = &'a Array2<f64>>) -> Result<Self> {
        let mut sum: Option<Array1<f64>> = None;
        let mut sq: Option<Array1<f64>> = None;
        let mut count = 0usize;
        for s in seqs {
            let s_sum = s.sum_axis(Axis(0));
            let s_sq = s.mapv(|v| v * v).sum_axis(Axis(0));
            sum = Some(match sum {
                Some(acc) => acc + s_sum,
                None => s_sum,
            });
            sq = Some(match sq {
                Some(acc) => acc + s_sq,
                None => s_sq,
            });
            count += s.nrows();
        }
        let (sum, sq) = match (sum, sq) {
            (Some(a), Some(b)) if count > 0 => (a, b),
            _ => return Err(Error::EmptyInput("no frames to fit a normalizer".into())),
        };
        let mean = sum / count as f64;
        let var = sq / count as f64 - mean.mapv(|m| m * m);
        let std = var.mapv(|v| v.max(0.0).sqrt().max(1e-6));
        Ok(Self { mean, std })
    }

    pub fn apply(&self, x: &Array2<f64>) -> Array2<f64> {
        (x - &self.mean) / &self.std
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CmModel {
    pub frontend: FrontendConfig,
    pub network: NetworkConfig,
    pub normalizer: Normalizer,
    pub params: ModelParams,
}

impl CmModel {
    pub fn build_frontend(&self) -> Result<Frontend> {
        Frontend::new(self.frontend)
    }

    /// Normalized front-end features.
    pub fn inputs(&self, fe: &Frontend, w: &Waveform) -> Result<Array2<f64>> {
        Ok(self.normalizer.apply(&fe.extract(w)?))
    }

    /// `N x feature_dim` frame features of `w`.
    pub fn extract_features(&self, fe: &Frontend, w: &Waveform) -> Result<FeatureSequence> {
        Ok(extract_frames(&self.params, &self.inputs(fe, w)?))
    }

    /// Full-length score; higher means more bona fide.
    pub fn score_waveform(&self, fe: &Frontend, w: &Waveform) -> Result<f64> {
        Ok(score(&self.params, &self.inputs(fe, w)?))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub config_hash: String,
    pub model: CmModel,
}

impl Checkpoint {
    pub fn new(model: CmModel, config_hash: impl Into<String>) -> Self {
        Self {
            format_version: CHECKPOINT_VERSION,
            config_hash: config_hash.into(),
            model,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string(self).map_err(|e| Error::Data(format!("checkpoint encoding: {e}")))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let ck: Checkpoint =
            serde_json::from_str(&text).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        if ck.format_version != CHECKPOINT_VERSION {
            return Err(Error::Data(format!(
                "{}: checkpoint format {} (expected {CHECKPOINT_VERSION})",
                path.display(),
                ck.format_version
            )));
        }
        if !ck.model.params.is_finite() {
            return Err(Error::Numerical {
                batch: 0,
                what: format!("{} holds non-finite parameters", path.display()),
            });
        }
        Ok(ck)
    }
}
