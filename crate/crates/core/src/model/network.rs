use ndarray::{Array1, Array2, ArrayView2, Axis, Dimension, Zip};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::contrastive::{cf_loss_and_gradient, BatchComposition, CfConfig, PairingMode};
use crate::error::{Error, Result};
use crate::manifest::Label;

pub const LEAKY_SLOPE: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkConfig {
    pub input_dim: usize,
    pub hidden: usize,
    pub feature_dim: usize,
    pub head_hidden: usize,
    pub head_layers: usize,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            input_dim: 25,
            hidden: 64,
            feature_dim: 32,
            head_hidden: 64,
            head_layers: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Affine {
    /// `in x out`.
    pub w: Array2<f64>,
    pub b: Array1<f64>,
}

impl Affine {
    fn init<R: Rng>(rng: &mut R, fan_in: usize, fan_out: usize, gain: f64) -> Self {
        let bound = (gain / fan_in as f64).sqrt();
        Self {
            w: Array2::from_shape_simple_fn((fan_in, fan_out), || rng.random_range(-bound..bound)),
            b: Array1::zeros(fan_out),
        }
    }

    fn zeros_like(&self) -> Self {
        Self {
            w: Array2::zeros(self.w.dim()),
            b: Array1::zeros(self.b.len()),
        }
    }

    fn forward(&self, x: &ArrayView2<'_, f64>) -> Array2<f64> {
        x.dot(&self.w) + &self.b
    }
}

/// Frame extractor (`input -> hidden -> feature_dim`) and classifier head
/// (`feature_dim -> head_hidden x head_layers -> 2`). Logit 0 is bona fide.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub extractor: Vec<Affine>,
    pub head: Vec<Affine>,
}

impl ModelParams {
    pub fn init<R: Rng>(cfg: &NetworkConfig, rng: &mut R) -> Self {
        // Uniform bounds giving variance 2/fan_in before LeakyReLU, 1/fan_in otherwise.
        let extractor = vec![
            Affine::init(rng, cfg.input_dim, cfg.hidden, 6.0),
            Affine::init(rng, cfg.hidden, cfg.feature_dim, 3.0),
        ];
        let mut head = Vec::new();
        let mut fan_in = cfg.feature_dim;
        for _ in 0..cfg.head_layers {
            head.push(Affine::init(rng, fan_in, cfg.head_hidden, 6.0));
            fan_in = cfg.head_hidden;
        }
        head.push(Affine::init(rng, fan_in, 2, 3.0));
        Self { extractor, head }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            extractor: self.extractor.iter().map(Affine::zeros_like).collect(),
            head: self.head.iter().map(Affine::zeros_like).collect(),
        }
    }

    pub fn layers(&self) -> impl Iterator<Item = &Affine> {
        self.extractor.iter().chain(&self.head)
    }

    pub fn layers_mut(&mut self) -> impl Iterator<Item = &mut Affine> {
        self.extractor.iter_mut().chain(self.head.iter_mut())
    }

    pub fn n_parameters(&self) -> usize {
        self.layers().map(|l| l.w.len() + l.b.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.layers().all(|l| l.w.iter().chain(&l.b).all(|v| v.is_finite()))
    }

    pub fn feature_dim(&self) -> usize {
        self.extractor.last().map(|l| l.b.len()).unwrap_or(0)
    }

    /// Flat view of every scalar, in layer order (weights then biases).
    pub fn to_flat(&self) -> Vec<f64> {
        self.layers().flat_map(|l| l.w.iter().chain(&l.b).copied()).collect()
    }

    pub fn from_flat(&self, flat: &[f64]) -> Self {
        let mut out = self.clone();
        let mut it = flat.iter();
        for l in out.layers_mut() {
            l.w.iter_mut().chain(l.b.iter_mut()).for_each(|v| *v = *it.next().expect("flat length"));
        }
        out
    }
}

fn leaky(v: f64) -> f64 {
    if v > 0.0 {
        v
    } else {
        LEAKY_SLOPE * v
    }
}

fn leaky_grad(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else {
        LEAKY_SLOPE
    }
}

/// Inputs to every layer and every pre-activation of one stack.
struct Trace {
    inputs: Vec<Array2<f64>>,
    pre: Vec<Array2<f64>>,
}

/// LeakyReLU after every layer but the last.
fn stack_forward(layers: &[Affine], x: Array2<f64>) -> (Array2<f64>, Trace) {
    let mut trace = Trace {
        inputs: Vec::with_capacity(layers.len()),
        pre: Vec::with_capacity(layers.len()),
    };
    let mut h = x;
    for (i, l) in layers.iter().enumerate() {
        let z = l.forward(&h.view());
        trace.inputs.push(h);
        h = if i + 1 < layers.len() { z.mapv(leaky) } else { z.clone() };
        trace.pre.push(z);
    }
    (h, trace)
}

fn stack_backward(layers: &[Affine], trace: &Trace, d_out: Array2<f64>, grads: &mut [Affine], need_input: bool) -> Option<Array2<f64>> {
    let mut d = d_out;
    for i in (0..layers.len()).rev() {
        if i + 1 < layers.len() {
            Zip::from(&mut d).and(&trace.pre[i]).for_each(|g, &z| *g *= leaky_grad(z));
        }
        grads[i].w += &trace.inputs[i].t().dot(&d);
        grads[i].b += &d.sum_axis(Axis(0));
        if i > 0 || need_input {
            d = d.dot(&layers[i].w.t());
        }
    }
    need_input.then_some(d)
}

/// Frame features `N x feature_dim` for normalized inputs.
pub fn extract_frames(params: &ModelParams, x: &Array2<f64>) -> Array2<f64> {
    stack_forward(&params.extractor, x.clone()).0
}

pub fn global_avg_pool(f: &Array2<f64>) -> Array1<f64> {
    f.mean_axis(Axis(0)).expect("at least one frame")
}

/// Logits `(bona, spoof)` and score `logit_bona - logit_spoof`.
pub fn classify(v: &Array1<f64>, params: &ModelParams) -> ([f64; 2], f64) {
    let (out, _) = stack_forward(&params.head, v.clone().insert_axis(Axis(0)));
    let logits = [out[[0, 0]], out[[0, 1]]];
    (logits, logits[0] - logits[1])
}

pub fn score(params: &ModelParams, x: &Array2<f64>) -> f64 {
    classify(&global_avg_pool(&extract_frames(params, x)), params).1
}

fn target_index(label: Label) -> usize {
    match label {
        Label::Bonafide => 0,
        Label::Spoof => 1,
    }
}

/// Cross-entropy of two logits and its gradient w.r.t. them.
pub fn cross_entropy(logits: [f64; 2], label: Label) -> (f64, [f64; 2]) {
    let m = logits[0].max(logits[1]);
    let lse = m + ((logits[0] - m).exp() + (logits[1] - m).exp()).ln();
    let t = target_index(label);
    let p = [(logits[0] - lse).exp(), (logits[1] - lse).exp()];
    let mut g = p;
    g[t] -= 1.0;
    (lse - logits[t], g)
}

/// Which batch members enter the contrastive term.
#[derive(Debug, Clone, PartialEq)]
pub struct CfGroup {
    pub bona: Vec<usize>,
    pub spoof: Vec<usize>,
    pub pairing: PairingMode,
    pub cfg: CfConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct LossParts {
    pub ce: f64,
    pub cf: f64,
}

impl LossParts {
    pub fn total(&self) -> f64 {
        self.ce + self.cf
    }
}

/// Mean cross-entropy over `inputs` (normalized `N_i x input_dim` matrices)
/// plus, when `cf` is given, the contrastive loss over the selected members'
/// frame features. Returns the loss and its exact gradient.
pub fn forward_backward(
    params: &ModelParams,
    inputs: &[&Array2<f64>],
    labels: &[Label],
    cf: Option<&CfGroup>,
    batch_id: usize,
) -> Result<(LossParts, ModelParams)> {
    if inputs.is_empty() || inputs.len() != labels.len() {
        return Err(Error::Shape(format!("{} inputs for {} labels", inputs.len(), labels.len())));
    }
    let b = inputs.len() as f64;
    let mut grads = params.zeros_like();
    let mut parts = LossParts::default();

    let mut frames = Vec::with_capacity(inputs.len());
    let mut traces = Vec::with_capacity(inputs.len());
    for x in inputs {
        let (f, t) = stack_forward(&params.extractor, (*x).clone());
        frames.push(f);
        traces.push(t);
    }
    let mut d_frames: Vec<Array2<f64>> = frames.iter().map(|f| Array2::zeros(f.dim())).collect();

    for (i, f) in frames.iter().enumerate() {
        let n = f.nrows() as f64;
        let v = global_avg_pool(f).insert_axis(Axis(0));
        let (out, trace) = stack_forward(&params.head, v);
        let (ce, g) = cross_entropy([out[[0, 0]], out[[0, 1]]], labels[i]);
        parts.ce += ce / b;
        let d_out = Array2::from_shape_vec((1, 2), vec![g[0] / b, g[1] / b]).expect("1x2");
        let d_v = stack_backward(&params.head, &trace, d_out, &mut grads.head, true).expect("input gradient");
        let row = d_v.row(0).mapv(|x| x / n);
        d_frames[i].rows_mut().into_iter().for_each(|mut r| r += &row);
    }

    if let Some(group) = cf {
        let pick = |idx: &[usize]| -> Result<Vec<Array2<f64>>> {
            idx.iter()
                .map(|&i| {
                    frames
                        .get(i)
                        .cloned()
                        .ok_or_else(|| Error::Composition(format!("member {i} outside a batch of {}", frames.len())))
                })
                .collect()
        };
        let batch = BatchComposition::new(pick(&group.bona)?, pick(&group.spoof)?, group.pairing)?;
        let (l, g) = cf_loss_and_gradient(&batch, &group.cfg)?;
        parts.cf = l;
        for (&i, gi) in group.bona.iter().chain(&group.spoof).zip(g) {
            let rows = gi.nrows();
            let mut head = d_frames[i].slice_mut(ndarray::s![..rows, ..]);
            head += &gi;
        }
    }

    if !parts.total().is_finite() {
        return Err(Error::Numerical {
            batch: batch_id,
            what: format!("loss is {}", parts.total()),
        });
    }
    for (d, t) in d_frames.into_iter().zip(&traces) {
        stack_backward(&params.extractor, t, d, &mut grads.extractor, false);
    }
    Ok((parts, grads))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: ModelParams,
    pub v: ModelParams,
    pub step: u64,
}

impl AdamState {
    pub fn new(params: &ModelParams) -> Self {
        Self {
            m: params.zeros_like(),
            v: params.zeros_like(),
            step: 0,
        }
    }
}

fn adam_tensor<D: Dimension>(
    p: &mut ndarray::Array<f64, D>,
    g: &ndarray::Array<f64, D>,
    m: &mut ndarray::Array<f64, D>,
    v: &mut ndarray::Array<f64, D>,
    lr: f64,
    cfg: &AdamConfig,
    step: u64,
) {
    let c1 = 1.0 - cfg.beta1.powi(step as i32);
    let c2 = 1.0 - cfg.beta2.powi(step as i32);
    Zip::from(p).and(g).and(m).and(v).for_each(|p, &g, m, v| {
        *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
        *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
        *p -= lr * (*m / c1) / ((*v / c2).sqrt() + cfg.eps);
    });
}

/// Bias-corrected Adam update.
pub fn adam_step(params: &mut ModelParams, grads: &ModelParams, state: &mut AdamState, lr: f64, cfg: &AdamConfig) {
    state.step += 1;
    let step = state.step;
    let layers = params
        .layers_mut()
        .zip(grads.layers())
        .zip(state.m.layers_mut().zip(state.v.layers_mut()));
    for ((p, g), (m, v)) in layers {
        adam_tensor(&mut p.w, &g.w, &mut m.w, &mut v.w, lr, cfg, step);
        adam_tensor(&mut p.b, &g.b, &mut m.b, &mut v.b, lr, cfg, step);
    }
}
