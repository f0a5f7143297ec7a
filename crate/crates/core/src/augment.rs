//! Waveform-level data augmentation: RawBoost-style noise, Butterworth
//! frequency masking and simulated lossy-codec degradation.
//!
//! Every op is a pure function of the input and a 64-bit seed. A plan draws
//! one op per (trial, view) from a seed derived from the master seed.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dsp::{
    design_butterworth_bandstop, design_butterworth_lowpass, filtfilt, Biquad, BiquadCascade, Waveform,
};
use crate::error::{Error, Result};
use crate::seed::derive_seed;

pub const MU: f64 = 255.0;
pub const CODEC_MIN_KBPS: f64 = 16.0;
pub const CODEC_MAX_KBPS: f64 = 320.0;
const CODEC_MIN_CUTOFF_HZ: f64 = 3000.0;
const CODEC_MIN_BITS: f64 = 6.0;
const CODEC_MAX_BITS: f64 = 12.0;
const CODEC_LOWPASS_ORDER: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RawBoostComponents {
    pub notch: bool,
    pub impulsive: bool,
    pub stationary: bool,
}

impl Default for RawBoostComponents {
    fn default() -> Self {
        Self {
            notch: true,
            impulsive: true,
            stationary: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AugmentKind {
    RawBoostLike {
        snr_db: (f64, f64),
        n_notches: (usize, usize),
        #[serde(default)]
        components: RawBoostComponents,
    },
    FreqMask {
        band_lo_khz: (f64, f64),
        width_khz: (f64, f64),
        order: usize,
    },
    CodecSim {
        bitrate_kbps: (f64, f64),
    },
}

impl AugmentKind {
    pub fn raw_boost() -> Self {
        AugmentKind::RawBoostLike {
            snr_db: (10.0, 40.0),
            n_notches: (1, 5),
            components: RawBoostComponents::default(),
        }
    }

    pub fn freq_mask() -> Self {
        AugmentKind::FreqMask {
            band_lo_khz: (0.3, 6.0),
            width_khz: (0.2, 2.0),
            order: 10,
        }
    }

    pub fn codec() -> Self {
        AugmentKind::CodecSim {
            bitrate_kbps: (CODEC_MIN_KBPS, CODEC_MAX_KBPS),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            AugmentKind::RawBoostLike { .. } => "rawboost",
            AugmentKind::FreqMask { .. } => "freq-mask",
            AugmentKind::CodecSim { .. } => "codec",
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ordered = |(lo, hi): (f64, f64)| lo.is_finite() && hi.is_finite() && lo <= hi;
        let ok = match *self {
            AugmentKind::RawBoostLike { snr_db, n_notches, .. } => ordered(snr_db) && n_notches.0 <= n_notches.1,
            AugmentKind::FreqMask {
                band_lo_khz,
                width_khz,
                order,
            } => ordered(band_lo_khz) && band_lo_khz.0 > 0.0 && ordered(width_khz) && width_khz.0 > 0.0 && order >= 2 && order % 2 == 0,
            AugmentKind::CodecSim { bitrate_kbps } => {
                ordered(bitrate_kbps) && bitrate_kbps.0 >= CODEC_MIN_KBPS && bitrate_kbps.1 <= CODEC_MAX_KBPS
            }
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid ranges for augmentation {}", self.name())))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentOp {
    pub kind: AugmentKind,
    pub seed: u64,
}

/// Parameters actually drawn by one application.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub enum Drawn {
    RawBoost {
        snr_db: f64,
        notches: Vec<(f64, f64)>,
        impulse_fraction: f64,
    },
    FreqMask {
        lo_hz: f64,
        hi_hz: f64,
    },
    Codec {
        bitrate_kbps: f64,
        cutoff_hz: f64,
        bits: u32,
    },
}

pub fn apply(w: &Waveform, op: &AugmentOp) -> Result<(Waveform, Drawn)> {
    op.kind.validate()?;
    if w.is_empty() {
        return Err(Error::EmptyInput("augmentation input is empty".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(op.seed);
    match op.kind {
        AugmentKind::RawBoostLike {
            snr_db,
            n_notches,
            components,
        } => rawboost_with(w, snr_db, n_notches, components, &mut rng),
        AugmentKind::FreqMask {
            band_lo_khz,
            width_khz,
            order,
        } => {
            let lo = 1000.0 * draw(&mut rng, band_lo_khz);
            let width = 1000.0 * draw(&mut rng, width_khz);
            let nyquist = w.sample_rate() as f64 / 2.0;
            let hi = (lo + width).min(0.95 * nyquist);
            if lo >= hi {
                return Err(Error::Parameter(format!(
                    "mask band starting at {lo:.0} Hz does not fit below {:.0} Hz",
                    0.95 * nyquist
                )));
            }
            let y = mask_band(w, lo, hi, order)?;
            Ok((y, Drawn::FreqMask { lo_hz: lo, hi_hz: hi }))
        }
        AugmentKind::CodecSim { bitrate_kbps } => {
            let r = draw(&mut rng, bitrate_kbps).round();
            codec_sim_at(w, r)
        }
    }
}

pub fn rawboost_like(w: &Waveform, op: &AugmentOp) -> Result<Waveform> {
    expect_kind(op, "rawboost")?;
    Ok(apply(w, op)?.0)
}

pub fn freq_mask(w: &Waveform, op: &AugmentOp) -> Result<Waveform> {
    expect_kind(op, "freq-mask")?;
    Ok(apply(w, op)?.0)
}

pub fn codec_sim(w: &Waveform, op: &AugmentOp) -> Result<Waveform> {
    expect_kind(op, "codec")?;
    Ok(apply(w, op)?.0)
}

fn expect_kind(op: &AugmentOp, name: &str) -> Result<()> {
    if op.kind.name() != name {
        return Err(Error::Parameter(format!("expected a {name} op, got {}", op.kind.name())));
    }
    Ok(())
}

fn draw(rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.random_range(lo..=hi)
    } else {
        lo
    }
}

fn rawboost_with(
    w: &Waveform,
    snr_range: (f64, f64),
    notch_range: (usize, usize),
    components: RawBoostComponents,
    rng: &mut ChaCha8Rng,
) -> Result<(Waveform, Drawn)> {
    let sr = w.sample_rate() as f64;
    let nyquist = sr / 2.0;
    // Every parameter is drawn whether or not its component is enabled.
    let n_notches = rng.random_range(notch_range.0..=notch_range.1);
    let notches: Vec<(f64, f64)> = (0..n_notches)
        .map(|_| (rng.random_range(100.0..0.9 * nyquist), rng.random_range(5.0..30.0)))
        .collect();
    let impulse_fraction = rng.random_range(0.01..0.1);
    let snr_db = draw(rng, snr_range);
    let tilt = rng.random_range(-0.9..0.9);
    let mut impulse_rng = ChaCha8Rng::seed_from_u64(rng.random());
    let mut noise_rng = ChaCha8Rng::seed_from_u64(rng.random());

    let mut x = w.samples().to_vec();
    if components.notch && !notches.is_empty() {
        let cascade = BiquadCascade {
            sections: notches.iter().map(|&(f, q)| Biquad::notch(f, q, sr)).collect(),
        };
        x = cascade.lfilter(&x);
    }
    if components.impulsive {
        for v in x.iter_mut() {
            if impulse_rng.random::<f64>() < impulse_fraction {
                let sign = if impulse_rng.random::<bool>() { 1.0 } else { -1.0 };
                let gain: f64 = impulse_rng.random_range(0.1..1.0);
                *v += sign * gain * v.abs();
            }
        }
    }
    if components.stationary {
        let target_rms = crate::dsp::rms(&x) / 10f64.powf(snr_db / 20.0);
        let mut noise = Vec::with_capacity(x.len());
        let mut prev = 0.0;
        for _ in 0..x.len() {
            let e: f64 = StandardNormal.sample(&mut noise_rng);
            prev = e + tilt * prev;
            noise.push(prev);
        }
        let nrms = crate::dsp::rms(&noise);
        if nrms > 0.0 {
            for (v, n) in x.iter_mut().zip(&noise) {
                *v += n * target_rms / nrms;
            }
        }
    }
    let (in_peak, out_peak) = (w.peak(), x.iter().fold(0.0f64, |m, v| m.max(v.abs())));
    if out_peak > 0.0 {
        let g = in_peak / out_peak;
        x.iter_mut().for_each(|v| *v *= g);
    }
    Ok((
        w.with_samples(x),
        Drawn::RawBoost {
            snr_db,
            notches,
            impulse_fraction,
        },
    ))
}

fn mask_band(w: &Waveform, lo: f64, hi: f64, order: usize) -> Result<Waveform> {
    let cascade = design_butterworth_bandstop(order, lo, hi, w.sample_rate() as f64)?;
    filtfilt(&cascade, w)
}

/// Codec degradation at a fixed bitrate: low-pass at the mapped cutoff, then
/// mu-law companded quantization at the mapped bit depth.
pub fn codec_sim_at(w: &Waveform, bitrate_kbps: f64) -> Result<(Waveform, Drawn)> {
    if !(CODEC_MIN_KBPS..=CODEC_MAX_KBPS).contains(&bitrate_kbps) {
        return Err(Error::Parameter(format!(
            "bitrate {bitrate_kbps} kbps outside {CODEC_MIN_KBPS}-{CODEC_MAX_KBPS}"
        )));
    }
    let nyquist = w.sample_rate() as f64 / 2.0;
    let t = (bitrate_kbps - CODEC_MIN_KBPS) / (CODEC_MAX_KBPS - CODEC_MIN_KBPS);
    let cutoff = (CODEC_MIN_CUTOFF_HZ + t * (nyquist - CODEC_MIN_CUTOFF_HZ)).round();
    let bits = (CODEC_MIN_BITS + t * (CODEC_MAX_BITS - CODEC_MIN_BITS)).round() as u32;

    let band_limited = if cutoff < nyquist && w.len() > 3 * CODEC_LOWPASS_ORDER {
        let lp = design_butterworth_lowpass(CODEC_LOWPASS_ORDER, cutoff, w.sample_rate() as f64)?;
        filtfilt(&lp, w)?
    } else {
        w.clone()
    };
    let peak = band_limited.peak();
    let y = if peak > 0.0 {
        let half_levels = (1u64 << (bits - 1)) as f64;
        band_limited
            .samples()
            .iter()
            .map(|&v| {
                let u = v / peak;
                let c = u.signum() * (1.0 + MU * u.abs()).ln() / (1.0 + MU).ln();
                let q = (c * half_levels).round() / half_levels;
                peak * q.signum() * ((1.0 + MU).powf(q.abs()) - 1.0) / MU
            })
            .collect()
    } else {
        band_limited.samples().to_vec()
    };
    Ok((
        w.with_samples(y),
        Drawn::Codec {
            bitrate_kbps,
            cutoff_hz: cutoff,
            bits,
        },
    ))
}

/// Seed for augmenting view `view` of `trial_id`.
pub fn trial_seed(master: u64, trial_id: &str, view: usize) -> u64 {
    derive_seed(master, &["augment", trial_id, &view.to_string()])
}

/// The augmentations a training run draws from: each (trial, view) gets one
/// op chosen uniformly from `ops`, seeded from `master_seed`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentPlan {
    pub ops: Vec<AugmentKind>,
    pub master_seed: u64,
}

impl AugmentPlan {
    pub fn standard(master_seed: u64) -> Self {
        Self {
            ops: vec![AugmentKind::raw_boost(), AugmentKind::freq_mask(), AugmentKind::codec()],
            master_seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.ops.is_empty() {
            return Err(Error::Config("augmentation plan has no ops".into()));
        }
        self.ops.iter().try_for_each(AugmentKind::validate)
    }

    pub fn op_for(&self, trial_id: &str, view: usize) -> AugmentOp {
        let seed = trial_seed(self.master_seed, trial_id, view);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let kind = self.ops[rng.random_range(0..self.ops.len())];
        AugmentOp { kind, seed: rng.random() }
    }

    pub fn augment(&self, w: &Waveform, trial_id: &str, view: usize) -> Result<Waveform> {
        Ok(apply(w, &self.op_for(trial_id, view))?.0)
    }

    /// Number of times each op kind is chosen over the given (trial, view) pairs.
    pub fn usage<'a>(&self, keys: impl IntoIterator<Item = (&'a str, usize)>) -> BTreeMap<&'static str, usize> {
        let mut counts = BTreeMap::new();
        for (id, view) in keys {
            *counts.entry(self.op_for(id, view).kind.name()).or_insert(0) += 1;
        }
        counts
    }
}
