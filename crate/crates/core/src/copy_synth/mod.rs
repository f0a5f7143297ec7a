//! Spoof generation by copy-synthesis: bona fide audio is analysed and
//! resynthesized through a vocoder channel, giving a spoofed trial that is
//! time-aligned with its source.
//!
//! Four DSP channels stand in for neural vocoders, each leaving a different
//! family of artifacts:
//!
//! * `gl-mel80`: 80-band mel magnitude, pseudo-inverse, Griffin-Lim phase.
//! * `gl-mel20`: the same with 20 bands (a lower-fidelity vocoder class).
//! * `phase-random`: full-resolution magnitude, Griffin-Lim from random phase.
//! * `lpc16`: frame-wise LPC source-filter vocoder.
//!
//! Any channel can be wrapped in a sample-rate round trip (`@24000`), which
//! resamples the input before synthesis and the output back afterwards.

mod griffin_lim;
mod lpc;
mod vocoded_set;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use griffin_lim::{griffin_lim, GriffinLimOutput, PhaseInit};
pub use lpc::{estimate_f0, lpc_analyze, lpc_resynthesize, F0Estimate, LpcAnalysis};
pub use vocoded_set::{build_vocoded_set, pair_distances, PairedTrialSet};

use crate::dsp::{mel_apply, mel_pseudo_inverse, resample, stft, MelFilterbank, StftConfig, Waveform};
use crate::error::{Error, Result};

pub const MIN_RATE: u32 = 8000;
pub const MAX_RATE: u32 = 48000;
pub const MIN_DURATION_SECS: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ChannelKind {
    GriffinLimMel { n_mels: usize, iters: usize },
    PhaseRandom { seed: u64, iters: usize },
    LpcSourceFilter { order: usize, frame_ms: f64, hop_ms: f64, seed: u64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VocoderChannel {
    pub kind: ChannelKind,
    /// Rate the synthesis runs at; `None` (or the native rate) means no
    /// resampling.
    pub intermediate_sr: Option<u32>,
}

impl VocoderChannel {
    pub fn griffin_lim_mel() -> Self {
        Self::native(ChannelKind::GriffinLimMel { n_mels: 80, iters: 32 })
    }

    pub fn coarse_mel_gl() -> Self {
        Self::native(ChannelKind::GriffinLimMel { n_mels: 20, iters: 32 })
    }

    pub fn phase_random(seed: u64) -> Self {
        Self::native(ChannelKind::PhaseRandom { seed, iters: 150 })
    }

    pub fn lpc_source_filter() -> Self {
        Self::native(ChannelKind::LpcSourceFilter {
            order: 16,
            frame_ms: 25.0,
            hop_ms: 10.0,
            seed: 0,
        })
    }

    /// The four default channels.
    pub fn default_set() -> Vec<Self> {
        vec![
            Self::griffin_lim_mel(),
            Self::coarse_mel_gl(),
            Self::phase_random(0),
            Self::lpc_source_filter(),
        ]
    }

    fn native(kind: ChannelKind) -> Self {
        Self {
            kind,
            intermediate_sr: None,
        }
    }

    pub fn via_rate(mut self, sr: u32) -> Self {
        self.intermediate_sr = Some(sr);
        self
    }

    /// Same channel with its random streams re-keyed.
    pub fn reseeded(mut self, seed: u64) -> Self {
        match &mut self.kind {
            ChannelKind::PhaseRandom { seed: s, .. } | ChannelKind::LpcSourceFilter { seed: s, .. } => *s = seed,
            ChannelKind::GriffinLimMel { .. } => {}
        }
        self
    }

    pub fn seed(&self) -> u64 {
        match self.kind {
            ChannelKind::PhaseRandom { seed, .. } | ChannelKind::LpcSourceFilter { seed, .. } => seed,
            ChannelKind::GriffinLimMel { .. } => 0,
        }
    }

    /// Attack tag written to manifests.
    pub fn name(&self) -> String {
        let base = match self.kind {
            ChannelKind::GriffinLimMel { n_mels, .. } => format!("gl-mel{n_mels}"),
            ChannelKind::PhaseRandom { .. } => "phase-random".to_string(),
            ChannelKind::LpcSourceFilter { order, .. } => format!("lpc{order}"),
        };
        match self.intermediate_sr {
            Some(sr) => format!("{base}@{sr}"),
            None => base,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match self.kind {
            ChannelKind::GriffinLimMel { n_mels, iters } => n_mels >= 8 && iters > 0,
            ChannelKind::PhaseRandom { iters, .. } => iters > 0,
            ChannelKind::LpcSourceFilter { order, frame_ms, hop_ms, .. } => {
                order > 0 && frame_ms > 0.0 && hop_ms > 0.0 && hop_ms <= frame_ms
            }
        };
        if !ok {
            return Err(Error::Parameter(format!("invalid parameters for channel {}", self.name())));
        }
        if let Some(sr) = self.intermediate_sr {
            check_rate(sr, &self.name())?;
        }
        Ok(())
    }

    fn synthesize_at_rate(&self, w: &Waveform) -> Result<Waveform> {
        let sr = w.sample_rate();
        match self.kind {
            ChannelKind::GriffinLimMel { n_mels, iters } => {
                let cfg = stft_config_for(sr, 0.064);
                let spec = stft(w, &cfg)?;
                let fb = MelFilterbank::new(n_mels, cfg.fft_size, sr, 0.0, sr as f64 / 2.0)?;
                let mel = mel_apply(&spec, &fb)?;
                let mag = mel_pseudo_inverse(&mel, &fb)?;
                Ok(griffin_lim(&mag, &cfg, iters, PhaseInit::Zero, sr)?.waveform)
            }
            ChannelKind::PhaseRandom { seed, iters } => {
                let cfg = stft_config_for(sr, 0.032);
                let mag = stft(w, &cfg)?.magnitude();
                Ok(griffin_lim(&mag, &cfg, iters, PhaseInit::Random { seed }, sr)?.waveform)
            }
            ChannelKind::LpcSourceFilter { order, frame_ms, hop_ms, seed } => {
                lpc_resynthesize(w, order, frame_ms, hop_ms, seed)
            }
        }
    }
}

impl fmt::Display for VocoderChannel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name())
    }
}

impl FromStr for VocoderChannel {
    type Err = Error;

    /// `gl-mel<N>`, `phase-random[:seed]`, `lpc<order>[:seed]`, each with an
    /// optional `@<rate>` suffix.
    fn from_str(s: &str) -> Result<Self> {
        let (body, rate) = match s.split_once('@') {
            Some((b, r)) => (
                b,
                Some(r.parse::<u32>().map_err(|_| Error::Config(format!("bad rate in channel {s:?}")))?),
            ),
            None => (s, None),
        };
        let (name, seed) = match body.split_once(':') {
            Some((n, sd)) => (
                n,
                sd.parse::<u64>().map_err(|_| Error::Config(format!("bad seed in channel {s:?}")))?,
            ),
            None => (body, 0),
        };
        let bad = || Error::Config(format!("unknown channel {s:?}"));
        let mut ch = if let Some(n) = name.strip_prefix("gl-mel") {
            VocoderChannel::native(ChannelKind::GriffinLimMel {
                n_mels: n.parse().map_err(|_| bad())?,
                iters: 32,
            })
        } else if name == "phase-random" {
            VocoderChannel::phase_random(seed)
        } else if let Some(n) = name.strip_prefix("lpc") {
            let mut ch = VocoderChannel::lpc_source_filter().reseeded(seed);
            if let ChannelKind::LpcSourceFilter { order, .. } = &mut ch.kind {
                *order = n.parse().map_err(|_| bad())?;
            }
            ch
        } else {
            return Err(bad());
        };
        ch.intermediate_sr = rate;
        ch.validate()?;
        Ok(ch)
    }
}

fn check_rate(sr: u32, what: &str) -> Result<()> {
    if !(MIN_RATE..=MAX_RATE).contains(&sr) {
        return Err(Error::Rate {
            rate: sr,
            what: what.to_string(),
        });
    }
    Ok(())
}

/// Hann STFT with a power-of-two FFT covering `window_secs`, hop = 1/4, centred.
fn stft_config_for(sr: u32, window_secs: f64) -> StftConfig {
    let fft_size = ((window_secs * sr as f64).round() as usize).next_power_of_two();
    StftConfig {
        fft_size,
        hop: fft_size / 4,
        win_length: fft_size,
        window: crate::dsp::Window::Hann,
        center: true,
    }
}

/// Resynthesizes `w` through `ch`. The output has the input's rate and
/// exactly its length.
pub fn copy_synthesize(w: &Waveform, ch: &VocoderChannel) -> Result<Waveform> {
    ch.validate()?;
    let native = w.sample_rate();
    check_rate(native, &ch.name())?;
    if w.duration_secs() < MIN_DURATION_SECS {
        return Err(Error::Length(format!(
            "copy-synthesis needs at least {MIN_DURATION_SECS} s, got {:.3} s",
            w.duration_secs()
        )));
    }
    if w.peak() == 0.0 {
        log::warn!("silent input to channel {}; output is the synthesized noise floor", ch.name());
    }
    let out = match ch.intermediate_sr {
        Some(sr) if sr != native => {
            let up = resample(w, sr)?;
            let y = ch.synthesize_at_rate(&up)?;
            resample(&y, native)?
        }
        _ => ch.synthesize_at_rate(w)?,
    };
    Ok(out.fit_to_len(w.len()))
}

/// Mean over frames of the per-frame RMS log-spectral distance (dB) between
/// two equal-rate signals, on a 512/128 Hann STFT.
pub fn log_spectral_distance(a: &Waveform, b: &Waveform) -> Result<f64> {
    if a.sample_rate() != b.sample_rate() {
        return Err(Error::Shape("log-spectral distance needs equal sample rates".into()));
    }
    let len = a.len().min(b.len());
    let cfg = StftConfig::default();
    let sa = stft(&a.slice(0, len), &cfg)?.magnitude();
    let sb = stft(&b.slice(0, len), &cfg)?.magnitude();
    let floor = 1e-10;
    let total: f64 = sa
        .rows()
        .into_iter()
        .zip(sb.rows())
        .map(|(ra, rb)| {
            let ms: f64 = ra
                .iter()
                .zip(rb.iter())
                .map(|(x, y)| (10.0 * ((x * x + floor) / (y * y + floor)).log10()).powi(2))
                .sum::<f64>()
                / ra.len() as f64;
            ms.sqrt()
        })
        .sum();
    Ok(total / sa.nrows() as f64)
}
