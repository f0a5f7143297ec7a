use std::collections::{BTreeMap, HashMap};
use std::fmt::{self, Write as _};
use std::str::FromStr;

use log::{debug, info, warn};
use ndarray::{s, Array2};
use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::frontend::{Frontend, FrontendConfig};
use super::network::{
    adam_step, cross_entropy, forward_backward, AdamConfig, AdamState, CfGroup, ModelParams, NetworkConfig,
};
use super::{CmModel, Normalizer};
use crate::augment::AugmentPlan;
use crate::contrastive::{select_spoofs, CfConfig, PairingMode};
use crate::dsp::{wav::read_wav, Waveform};
use crate::error::{Error, Result};
use crate::manifest::{Label, TrialManifest};
use crate::metrics::{eer_from_scores, ScoreSet};
use crate::seed::rng_for;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LossMode {
    #[serde(rename = "ce")]
    Ce,
    #[serde(rename = "ce+cf")]
    CeCf,
}

impl fmt::Display for LossMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LossMode::Ce => "ce",
            LossMode::CeCf => "ce+cf",
        })
    }
}

impl FromStr for LossMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ce" => Ok(LossMode::Ce),
            "ce+cf" | "ce-cf" | "cecf" => Ok(LossMode::CeCf),
            other => Err(Error::Config(format!("unknown loss mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr0: f64,
    /// Factor applied every `lr_step_epochs` epochs.
    pub lr_decay: f64,
    pub lr_step_epochs: usize,
    pub adam: AdamConfig,
    pub batch_size: usize,
    pub max_segment_secs: f64,
    pub patience: usize,
    pub max_epochs: usize,
    pub seeds: Vec<u64>,
    pub loss_mode: LossMode,
    pub pairing: PairingMode,
    /// Spoofed trials per contrastive batch (S).
    pub spoofs_per_batch: usize,
    /// Augmented views per trial (K).
    pub aug_views: usize,
    pub cf: CfConfig,
    pub network: NetworkConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr0: 1e-3,
            lr_decay: 0.1,
            lr_step_epochs: 10,
            adam: AdamConfig::default(),
            batch_size: 8,
            max_segment_secs: 4.0,
            patience: 10,
            max_epochs: 30,
            seeds: vec![1, 2, 3],
            loss_mode: LossMode::Ce,
            pairing: PairingMode::Paired,
            spoofs_per_batch: 4,
            aug_views: 1,
            cf: CfConfig::default(),
            network: NetworkConfig::default(),
        }
    }
}

impl TrainConfig {
    /// Schedule for fine-tuning a large pre-trained front end.
    pub fn pretrained_frontend() -> Self {
        Self {
            lr0: 5e-6,
            max_epochs: 100,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |v: f64| v > 0.0 && v.is_finite();
        if !positive(self.lr0) || !positive(self.lr_decay) || !positive(self.max_segment_secs) {
            return Err(Error::Config("lr0, lr_decay and max_segment_secs must be positive".into()));
        }
        if self.lr_step_epochs == 0 || self.batch_size == 0 || self.max_epochs == 0 {
            return Err(Error::Config("lr_step_epochs, batch_size and max_epochs must be positive".into()));
        }
        if self.patience < 1 {
            return Err(Error::Config("patience must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.adam.beta1) || !(0.0..1.0).contains(&self.adam.beta2) || !positive(self.adam.eps) {
            return Err(Error::Config("Adam betas must lie in [0, 1) and eps must be positive".into()));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("at least one seed is required".into()));
        }
        if self.loss_mode == LossMode::CeCf {
            self.cf.validate()?;
            if self.spoofs_per_batch == 0 || self.aug_views == 0 {
                return Err(Error::Composition(format!(
                    "contrastive batches need S >= 1 and K >= 1, got S={} K={}",
                    self.spoofs_per_batch, self.aug_views
                )));
            }
        }
        Ok(())
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.lr0 * self.lr_decay.powi((epoch / self.lr_step_epochs) as i32)
    }

    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }
}

/// Stops after `patience` consecutive epochs without a strict improvement.
#[derive(Debug, Clone, PartialEq)]
pub struct EarlyStopping {
    pub patience: usize,
    pub best_loss: f64,
    pub best_epoch: usize,
    bad_epochs: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best_loss: f64::INFINITY,
            best_epoch: 0,
            bad_epochs: 0,
        }
    }

    /// Returns whether `loss` improved on the best so far.
    pub fn observe(&mut self, epoch: usize, loss: f64) -> bool {
        if loss < self.best_loss {
            self.best_loss = loss;
            self.best_epoch = epoch;
            self.bad_epochs = 0;
            true
        } else {
            self.bad_epochs += 1;
            false
        }
    }

    pub fn should_stop(&self) -> bool {
        self.bad_epochs >= self.patience
    }
}

/// A trial's front-end features: `views[0]` is the original, `views[v]` the
/// `v`-th augmented view.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub trial_id: String,
    pub source_id: String,
    pub label: Label,
    pub views: Vec<Array2<f64>>,
}

#[derive(Debug, Clone, Default)]
pub struct TrainingData {
    pub examples: Vec<Example>,
    /// Bona fide id -> ids of its spoofed versions present in `examples`.
    pub pairing: BTreeMap<String, Vec<String>>,
    index: HashMap<String, usize>,
}

impl TrainingData {
    pub fn new(examples: Vec<Example>) -> Self {
        let index: HashMap<String, usize> =
            examples.iter().enumerate().map(|(i, e)| (e.trial_id.clone(), i)).collect();
        let mut pairing: BTreeMap<String, Vec<String>> = BTreeMap::new();
        for e in &examples {
            match e.label {
                Label::Bonafide => {
                    pairing.entry(e.trial_id.clone()).or_default();
                }
                Label::Spoof => pairing.entry(e.source_id.clone()).or_default().push(e.trial_id.clone()),
            }
        }
        pairing.values_mut().for_each(|v| v.sort());
        Self {
            examples,
            pairing,
            index,
        }
    }

    /// Same trials keeping at most `n` views each.
    pub fn with_views(&self, n: usize) -> Self {
        Self::new(
            self.examples
                .iter()
                .map(|e| Example {
                    views: e.views.iter().take(n.max(1)).cloned().collect(),
                    ..e.clone()
                })
                .collect(),
        )
    }

    /// Trials whose record satisfies `keep`.
    pub fn filtered(&self, keep: impl Fn(&Example) -> bool) -> Self {
        Self::new(self.examples.iter().filter(|e| keep(e)).cloned().collect())
    }

    pub fn get(&self, trial_id: &str) -> Option<&Example> {
        self.index.get(trial_id).map(|&i| &self.examples[i])
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn count(&self, label: Label) -> usize {
        self.examples.iter().filter(|e| e.label == label).count()
    }

    fn check_classes(&self, what: &str) -> Result<()> {
        if self.count(Label::Bonafide) == 0 || self.count(Label::Spoof) == 0 {
            return Err(Error::Config(format!(
                "{what} set needs both classes, has {} bona fide and {} spoofed trials",
                self.count(Label::Bonafide),
                self.count(Label::Spoof)
            )));
        }
        Ok(())
    }
}

/// Loads every record of `manifest` and extracts front-end features for the
/// original and `k` augmented views. Unreadable trials are returned by id.
pub fn load_examples(
    manifest: &TrialManifest,
    fe: &Frontend,
    plan: Option<&AugmentPlan>,
    k: usize,
) -> Result<(TrainingData, Vec<String>)> {
    if k > 0 && plan.is_none() {
        return Err(Error::Config("augmented views need an augmentation plan".into()));
    }
    let loaded: Vec<std::result::Result<Example, String>> = manifest
        .records
        .par_iter()
        .map(|r| {
            let build = || -> Result<Example> {
                let w = read_wav(manifest.resolve(r))?;
                let mut views = vec![fe.extract(&w)?];
                if let Some(plan) = plan {
                    for v in 1..=k {
                        views.push(fe.extract(&plan.augment(&w, &r.trial_id, v)?)?);
                    }
                }
                Ok(Example {
                    trial_id: r.trial_id.clone(),
                    source_id: r.source_id.clone(),
                    label: r.label,
                    views,
                })
            };
            build().map_err(|e| {
                warn!("skipping {}: {e}", r.trial_id);
                r.trial_id.clone()
            })
        })
        .collect();
    let mut examples = Vec::new();
    let mut missing = Vec::new();
    for item in loaded {
        match item {
            Ok(e) => examples.push(e),
            Err(id) => missing.push(id),
        }
    }
    Ok((TrainingData::new(examples), missing))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub dev_loss: f64,
    pub dev_eer: f64,
    pub lr: f64,
}

pub fn history_csv(history: &[EpochRecord]) -> String {
    let mut out = String::from("epoch,train_loss,dev_loss,dev_eer,lr\n");
    for r in history {
        let _ = writeln!(out, "{},{},{},{},{}", r.epoch, r.train_loss, r.dev_loss, r.dev_eer, r.lr);
    }
    out
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: CmModel,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
}

fn crop(x: &Array2<f64>, len: usize, offset: usize) -> Array2<f64> {
    if offset == 0 && len == x.nrows() {
        x.clone()
    } else {
        x.slice(s![offset..offset + len, ..]).to_owned()
    }
}

fn random_offset<R: Rng>(n: usize, len: usize, rng: &mut R) -> usize {
    if n > len {
        rng.random_range(0..=n - len)
    } else {
        0
    }
}

/// Batches of (example, view) members plus the contrastive grouping, if any.
struct Batch {
    members: Vec<(usize, usize)>,
    cf: Option<CfGroup>,
}

fn plan_epoch<R: Rng>(data: &TrainingData, cfg: &TrainConfig, rng: &mut R) -> Result<Vec<Batch>> {
    match cfg.loss_mode {
        LossMode::Ce => {
            let mut samples: Vec<(usize, usize)> = data
                .examples
                .iter()
                .enumerate()
                .flat_map(|(i, e)| (0..e.views.len()).map(move |v| (i, v)))
                .collect();
            samples.shuffle(rng);
            Ok(samples
                .chunks(cfg.batch_size)
                .map(|c| Batch {
                    members: c.to_vec(),
                    cf: None,
                })
                .collect())
        }
        LossMode::CeCf => {
            let mut anchors: Vec<usize> = (0..data.len()).filter(|&i| data.examples[i].label.is_bonafide()).collect();
            anchors.shuffle(rng);
            let pool: Vec<String> = data
                .examples
                .iter()
                .filter(|e| !e.label.is_bonafide())
                .map(|e| e.trial_id.clone())
                .collect();
            let views = cfg.aug_views + 1;
            anchors
                .into_iter()
                .map(|a| {
                    let anchor = &data.examples[a];
                    let ids =
                        select_spoofs(&anchor.trial_id, cfg.spoofs_per_batch, cfg.pairing, &data.pairing, &pool, rng)?;
                    let spoofs: Vec<usize> = ids
                        .iter()
                        .map(|id| data.index[id.as_str()])
                        .collect();
                    for &i in std::iter::once(&a).chain(&spoofs) {
                        if data.examples[i].views.len() < views {
                            return Err(Error::Composition(format!(
                                "{} has {} views, {views} needed",
                                data.examples[i].trial_id,
                                data.examples[i].views.len()
                            )));
                        }
                    }
                    let mut members: Vec<(usize, usize)> = (0..views).map(|v| (a, v)).collect();
                    for v in 0..views {
                        members.extend(spoofs.iter().map(|&sp| (sp, v)));
                    }
                    Ok(Batch {
                        cf: Some(CfGroup {
                            bona: (0..views).collect(),
                            spoof: (views..members.len()).collect(),
                            pairing: cfg.pairing,
                            cfg: cfg.cf,
                        }),
                        members,
                    })
                })
                .collect()
        }
    }
}

/// Mean full-length CE and EER on the original views of `data`.
fn evaluate(params: &ModelParams, data: &[Array2<f64>], labels: &[Label]) -> Result<(f64, f64)> {
    let results: Vec<(f64, f64)> = data
        .par_iter()
        .zip(labels)
        .map(|(x, &label)| {
            let pooled = super::network::global_avg_pool(&super::network::extract_frames(params, x));
            let (logits, score) = super::network::classify(&pooled, params);
            (cross_entropy(logits, label).0, score)
        })
        .collect();
    let loss = results.iter().map(|r| r.0).sum::<f64>() / results.len() as f64;
    let bona: Vec<f64> = results.iter().zip(labels).filter(|(_, l)| l.is_bonafide()).map(|(r, _)| r.1).collect();
    let spoof: Vec<f64> = results.iter().zip(labels).filter(|(_, l)| !l.is_bonafide()).map(|(r, _)| r.1).collect();
    let eer = eer_from_scores(&bona, &spoof)?.eer;
    Ok((loss, eer))
}

/// Trains one countermeasure and returns the checkpoint with the lowest
/// development loss.
pub fn train(
    train_set: &TrainingData,
    dev_set: &TrainingData,
    cfg: &TrainConfig,
    frontend: FrontendConfig,
    seed: u64,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    train_set.check_classes("training")?;
    dev_set.check_classes("development")?;
    if cfg.network.input_dim != frontend.dim() {
        return Err(Error::Config(format!(
            "network input {} does not match front-end dimension {}",
            cfg.network.input_dim,
            frontend.dim()
        )));
    }

    let normalizer = Normalizer::fit(train_set.examples.iter().map(|e| &e.views[0]))?;
    let norm_train: Vec<Vec<Array2<f64>>> = train_set
        .examples
        .iter()
        .map(|e| e.views.iter().map(|v| normalizer.apply(v)).collect())
        .collect();
    let dev_inputs: Vec<Array2<f64>> = dev_set.examples.iter().map(|e| normalizer.apply(&e.views[0])).collect();
    let dev_labels: Vec<Label> = dev_set.examples.iter().map(|e| e.label).collect();
    let max_frames = frontend.frames_in(cfg.max_segment_secs);

    let mut params = ModelParams::init(&cfg.network, &mut rng_for(seed, &["init"]));
    let mut adam = AdamState::new(&params);
    let mut best = params.clone();
    let mut stopper = EarlyStopping::new(cfg.patience);
    let mut history = Vec::new();
    let mut batch_id = 0usize;

    for epoch in 0..cfg.max_epochs {
        let mut rng = rng_for(seed, &["epoch", &epoch.to_string()]);
        let lr = cfg.lr_at(epoch);
        let batches = plan_epoch(train_set, cfg, &mut rng)?;
        let mut total = 0.0;
        for batch in &batches {
            let inputs: Vec<Array2<f64>> = if batch.cf.is_some() {
                let n = batch.members.iter().map(|&(i, v)| norm_train[i][v].nrows()).min().unwrap_or(0);
                let len = n.min(max_frames);
                let offset = random_offset(n, len, &mut rng);
                batch.members.iter().map(|&(i, v)| crop(&norm_train[i][v], len, offset)).collect()
            } else {
                batch
                    .members
                    .iter()
                    .map(|&(i, v)| {
                        let x = &norm_train[i][v];
                        let len = x.nrows().min(max_frames);
                        let offset = random_offset(x.nrows(), len, &mut rng);
                        crop(x, len, offset)
                    })
                    .collect()
            };
            let refs: Vec<&Array2<f64>> = inputs.iter().collect();
            let labels: Vec<Label> = batch.members.iter().map(|&(i, _)| train_set.examples[i].label).collect();
            let (parts, grads) = forward_backward(&params, &refs, &labels, batch.cf.as_ref(), batch_id)?;
            adam_step(&mut params, &grads, &mut adam, lr, &cfg.adam);
            total += parts.total();
            batch_id += 1;
        }
        if !params.is_finite() {
            return Err(Error::Numerical {
                batch: batch_id,
                what: "parameters became non-finite".into(),
            });
        }
        let (dev_loss, dev_eer) = evaluate(&params, &dev_inputs, &dev_labels)?;
        let record = EpochRecord {
            epoch: epoch + 1,
            train_loss: total / batches.len().max(1) as f64,
            dev_loss,
            dev_eer,
            lr,
        };
        debug!(
            "epoch {}: train {:.4} dev {:.4} eer {:.4}",
            record.epoch, record.train_loss, record.dev_loss, record.dev_eer
        );
        history.push(record);
        if stopper.observe(epoch + 1, dev_loss) {
            best = params.clone();
        }
        if stopper.should_stop() {
            break;
        }
    }
    info!(
        "seed {seed}: best epoch {} of {}, dev loss {:.4}",
        stopper.best_epoch,
        history.len(),
        stopper.best_loss
    );
    Ok(TrainOutcome {
        model: CmModel {
            frontend,
            network: cfg.network,
            normalizer,
            params: best,
        },
        history,
        best_epoch: stopper.best_epoch,
    })
}

/// Full-length scores for every record of `manifest`, after `prep`.
/// Unreadable trials are returned by id instead of scored.
pub fn score_set<F>(manifest: &TrialManifest, model: &CmModel, set_name: &str, prep: F) -> Result<(ScoreSet, Vec<String>)>
where
    F: Fn(Waveform) -> Waveform + Sync,
{
    let fe = model.build_frontend()?;
    let scored: Vec<std::result::Result<(String, f64), String>> = manifest
        .records
        .par_iter()
        .map(|r| {
            read_wav(manifest.resolve(r))
                .and_then(|w| model.score_waveform(&fe, &prep(w)))
                .map(|s| (r.trial_id.clone(), s))
                .map_err(|e| {
                    warn!("cannot score {}: {e}", r.trial_id);
                    r.trial_id.clone()
                })
        })
        .collect();
    let mut scores = Vec::new();
    let mut missing = Vec::new();
    for s in scored {
        match s {
            Ok(v) => scores.push(v),
            Err(id) => missing.push(id),
        }
    }
    Ok((ScoreSet::from_scores(&scores, manifest, set_name)?, missing))
}
