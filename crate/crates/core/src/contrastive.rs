//! Two-class supervised contrastive feature loss over aligned feature
//! sequences, with its analytic gradient and mini-batch composition.
//!
//! A batch holds the bona fide views `I` (a trial and its augmented copies)
//! and the spoofed views `J` (its vocoded versions and their augmented
//! copies). For member `z`, `f(z, x)` is the mean frame-wise cosine similarity
//! divided by `tau`, and `H(z)` sums `exp f(z, .)` over every other member.
//! The loss is `-sum_z 1/(|C(z)|-1) sum_{p in C(z), p != z} log(exp f(z,p) / H(z))`
//! where `C(z)` is the class of `z`.

use std::collections::BTreeMap;

use ndarray::{Array2, ArrayView2, Axis};
use rand::seq::IndexedRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::augment::AugmentPlan;
use crate::dsp::Waveform;
use crate::error::{Error, Result};

/// `N x D` frame features.
pub type FeatureSequence = Array2<f64>;

pub const NORM_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CfLevels {
    Sequence,
    Utterance,
    Both,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CfConfig {
    pub tau: f64,
    pub levels: CfLevels,
}

impl Default for CfConfig {
    fn default() -> Self {
        Self {
            tau: 0.07,
            levels: CfLevels::Both,
        }
    }
}

impl CfConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::Config(format!("temperature must be positive, got {}", self.tau)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PairingMode {
    Paired,
    Random,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchComposition {
    pub bona_views: Vec<FeatureSequence>,
    pub spoof_views: Vec<FeatureSequence>,
    pub pairing: PairingMode,
}

impl BatchComposition {
    /// Crops every member to the shortest sequence and checks the class sizes.
    pub fn new(
        bona_views: Vec<FeatureSequence>,
        spoof_views: Vec<FeatureSequence>,
        pairing: PairingMode,
    ) -> Result<Self> {
        let n = bona_views
            .iter()
            .chain(&spoof_views)
            .map(|s| s.nrows())
            .min()
            .unwrap_or(0);
        let crop = |v: Vec<FeatureSequence>| -> Vec<FeatureSequence> {
            v.into_iter()
                .map(|s| if s.nrows() == n { s } else { s.slice(ndarray::s![..n, ..]).to_owned() })
                .collect()
        };
        let b = Self {
            bona_views: crop(bona_views),
            spoof_views: crop(spoof_views),
            pairing,
        };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        if self.bona_views.len() < 2 || self.spoof_views.len() < 2 {
            return Err(Error::Composition(format!(
                "need at least two members per class, got |I|={} |J|={}",
                self.bona_views.len(),
                self.spoof_views.len()
            )));
        }
        let dim = self.bona_views[0].dim();
        if dim.0 == 0 || dim.1 == 0 {
            return Err(Error::Composition("empty feature sequences".into()));
        }
        if self.members().any(|m| m.dim() != dim) {
            return Err(Error::Shape("batch members differ in shape".into()));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.bona_views.len() + self.spoof_views.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Bona fide views first, then spoofed views.
    pub fn members(&self) -> impl Iterator<Item = &FeatureSequence> {
        self.bona_views.iter().chain(&self.spoof_views)
    }

    fn views(&self) -> Vec<ArrayView2<'_, f64>> {
        self.members().map(|m| m.view()).collect()
    }

    fn pooled(&self) -> Vec<Array2<f64>> {
        self.members().map(pool).collect()
    }
}

/// Mean over frames as a `1 x D` sequence.
pub fn pool(seq: &FeatureSequence) -> Array2<f64> {
    seq.mean_axis(Axis(0))
        .expect("non-empty sequence")
        .insert_axis(Axis(0))
}

fn floored_norm(v: ndarray::ArrayView1<'_, f64>) -> f64 {
    v.dot(&v).sqrt().max(NORM_FLOOR)
}

pub fn cosine_seq_similarity(a: &FeatureSequence, b: &FeatureSequence, tau: f64) -> Result<f64> {
    similarity(a.view(), b.view(), tau)
}

fn similarity(a: ArrayView2<'_, f64>, b: ArrayView2<'_, f64>, tau: f64) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::Shape(format!("sequences {:?} and {:?} differ", a.dim(), b.dim())));
    }
    if a.nrows() == 0 {
        return Err(Error::EmptyInput("empty feature sequence".into()));
    }
    let mut total = 0.0;
    for (n, (ra, rb)) in a.rows().into_iter().zip(b.rows()).enumerate() {
        let dot = ra.dot(&rb);
        let (na, nb) = (ra.dot(&ra).sqrt(), rb.dot(&rb).sqrt());
        if na == 0.0 && nb == 0.0 {
            return Err(Error::DegenerateFrame { frame: n });
        }
        total += dot / (floored_norm(ra) * floored_norm(rb));
    }
    Ok(total / (a.nrows() as f64 * tau))
}

fn similarity_matrix(members: &[ArrayView2<'_, f64>], tau: f64) -> Result<Array2<f64>> {
    let m = members.len();
    let mut s = Array2::zeros((m, m));
    for a in 0..m {
        for b in a..m {
            let v = similarity(members[a], members[b], tau)?;
            s[[a, b]] = v;
            s[[b, a]] = v;
        }
    }
    Ok(s)
}

fn log_sum_exp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = values.clone().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + values.map(|v| (v - max).exp()).sum::<f64>().ln()
}

fn row_log_partition(s: &Array2<f64>, a: usize) -> f64 {
    log_sum_exp((0..s.ncols()).filter(move |&b| b != a).map(move |b| s[[a, b]]))
}

/// `log H(z)` for batch member `index` (bona fide views first).
pub fn log_partition(batch: &BatchComposition, index: usize, tau: f64) -> Result<f64> {
    if index >= batch.len() {
        return Err(Error::Composition(format!("member {index} not in a batch of {}", batch.len())));
    }
    let s = similarity_matrix(&batch.views(), tau)?;
    Ok(row_log_partition(&s, index))
}

pub fn partition(batch: &BatchComposition, index: usize, tau: f64) -> Result<f64> {
    Ok(log_partition(batch, index, tau)?.exp())
}

/// Loss and `dL/dS` for one level; `n_bona` leading members are bona fide.
fn level_loss(s: &Array2<f64>, n_bona: usize) -> (f64, Array2<f64>) {
    let m = s.nrows();
    let class = |i: usize| i < n_bona;
    let mut loss = 0.0;
    let mut g = Array2::zeros((m, m));
    for a in 0..m {
        let same = if class(a) { n_bona } else { m - n_bona };
        let w = 1.0 / (same - 1) as f64;
        let lse = row_log_partition(s, a);
        let positives: f64 = (0..m).filter(|&p| p != a && class(p) == class(a)).map(|p| s[[a, p]]).sum();
        loss += -w * positives + lse;
        for b in (0..m).filter(|&b| b != a) {
            let pos = if class(b) == class(a) { w } else { 0.0 };
            g[[a, b]] = (s[[a, b]] - lse).exp() - pos;
        }
    }
    (loss, g)
}

/// Gradient of the loss w.r.t. every frame, given `dL/dS` (rows are anchors).
fn chain_similarity(members: &[ArrayView2<'_, f64>], g: &Array2<f64>, tau: f64) -> Vec<Array2<f64>> {
    let m = members.len();
    let (n, d) = members[0].dim();
    let scale = 1.0 / (n as f64 * tau);
    let mut grads = vec![Array2::zeros((n, d)); m];
    for a in 0..m {
        for b in 0..m {
            if a == b {
                continue;
            }
            let coef = (g[[a, b]] + g[[b, a]]) * scale;
            if coef == 0.0 {
                continue;
            }
            for t in 0..n {
                let xa = members[a].row(t);
                let xb = members[b].row(t);
                let (na, nb) = (floored_norm(xa), floored_norm(xb));
                let cos = xa.dot(&xb) / (na * nb);
                let mut row = grads[a].row_mut(t);
                for k in 0..d {
                    row[k] += coef * (xb[k] / (na * nb) - cos * xa[k] / (na * na));
                }
            }
        }
    }
    grads
}

/// Loss and per-member frame gradients (bona fide views first).
pub fn cf_loss_and_gradient(batch: &BatchComposition, cfg: &CfConfig) -> Result<(f64, Vec<Array2<f64>>)> {
    cfg.validate()?;
    batch.validate()?;
    let n_bona = batch.bona_views.len();
    let (n, d) = batch.bona_views[0].dim();
    let mut loss = 0.0;
    let mut grads = vec![Array2::zeros((n, d)); batch.len()];
    if matches!(cfg.levels, CfLevels::Sequence | CfLevels::Both) {
        let views = batch.views();
        let s = similarity_matrix(&views, cfg.tau)?;
        let (l, g) = level_loss(&s, n_bona);
        loss += l;
        for (acc, part) in grads.iter_mut().zip(chain_similarity(&views, &g, cfg.tau)) {
            *acc += &part;
        }
    }
    if matches!(cfg.levels, CfLevels::Utterance | CfLevels::Both) {
        let pooled = batch.pooled();
        let views: Vec<_> = pooled.iter().map(|p| p.view()).collect();
        let s = similarity_matrix(&views, cfg.tau)?;
        let (l, g) = level_loss(&s, n_bona);
        loss += l;
        for (acc, part) in grads.iter_mut().zip(chain_similarity(&views, &g, cfg.tau)) {
            // Mean pooling spreads the pooled gradient evenly over frames.
            let row = part.row(0).mapv(|v| v / n as f64);
            for mut r in acc.rows_mut() {
                r += &row;
            }
        }
    }
    Ok((loss, grads))
}

pub fn contrastive_feature_loss(batch: &BatchComposition, cfg: &CfConfig) -> Result<f64> {
    cfg.validate()?;
    batch.validate()?;
    let n_bona = batch.bona_views.len();
    let mut loss = 0.0;
    if matches!(cfg.levels, CfLevels::Sequence | CfLevels::Both) {
        loss += level_loss(&similarity_matrix(&batch.views(), cfg.tau)?, n_bona).0;
    }
    if matches!(cfg.levels, CfLevels::Utterance | CfLevels::Both) {
        let pooled = batch.pooled();
        let views: Vec<_> = pooled.iter().map(|p| p.view()).collect();
        loss += level_loss(&similarity_matrix(&views, cfg.tau)?, n_bona).0;
    }
    Ok(loss)
}

pub fn cf_gradient(batch: &BatchComposition, cfg: &CfConfig) -> Result<Vec<Array2<f64>>> {
    Ok(cf_loss_and_gradient(batch, cfg)?.1)
}

/// Chooses the `s` spoofed trials that accompany `bona_id` in a batch.
///
/// Paired mode returns the trial's own vocoded versions from the pairing
/// index; random mode samples `s` distinct trials from `pool`.
pub fn select_spoofs<R: Rng>(
    bona_id: &str,
    s: usize,
    mode: PairingMode,
    pairing: &BTreeMap<String, Vec<String>>,
    pool: &[String],
    rng: &mut R,
) -> Result<Vec<String>> {
    if s == 0 {
        return Err(Error::Composition("S must be at least 1".into()));
    }
    match mode {
        PairingMode::Paired => {
            let own = pairing
                .get(bona_id)
                .ok_or_else(|| Error::Composition(format!("{bona_id} has no pairing entry")))?;
            if own.len() < s {
                return Err(Error::Composition(format!(
                    "{bona_id} has {} vocoded versions, {s} needed",
                    own.len()
                )));
            }
            Ok(own[..s].to_vec())
        }
        PairingMode::Random => {
            if pool.len() < s {
                return Err(Error::Composition(format!("spoof pool has {} trials, {s} needed", pool.len())));
            }
            Ok(pool.choose_multiple(rng, s).cloned().collect())
        }
    }
}

/// Waveform views of one contrastive batch before feature extraction:
/// `I` = the bona fide trial and its `k` augmented views, `J` = the spoofed
/// trials followed by their `k` augmented views each.
#[derive(Debug, Clone, PartialEq)]
pub struct ViewSet {
    pub bona: Vec<Waveform>,
    pub spoof: Vec<Waveform>,
}

pub fn compose_views(
    bona_id: &str,
    bona: &Waveform,
    spoofed: &[(String, Waveform)],
    k: usize,
    plan: Option<&AugmentPlan>,
) -> Result<ViewSet> {
    if spoofed.is_empty() {
        return Err(Error::Composition("no spoofed trials (S = 0)".into()));
    }
    if k == 0 {
        return Err(Error::Composition("K = 0 leaves a single bona fide view".into()));
    }
    let plan = plan.ok_or_else(|| Error::Composition("K > 0 needs an augmentation plan".into()))?;
    let mut views = ViewSet {
        bona: vec![bona.clone()],
        spoof: spoofed.iter().map(|(_, w)| w.clone()).collect(),
    };
    for v in 1..=k {
        views.bona.push(plan.augment(bona, bona_id, v)?);
    }
    for v in 1..=k {
        for (id, w) in spoofed {
            views.spoof.push(plan.augment(w, id, v)?);
        }
    }
    Ok(views)
}
