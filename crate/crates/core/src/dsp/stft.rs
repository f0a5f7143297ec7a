use std::f64::consts::PI;
use std::sync::Arc;

use ndarray::Array2;
use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use super::Waveform;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Window {
    #[default]
    Hann,
    Hamming,
    Rectangular,
}

impl Window {
    /// Periodic form of the taper, which is what makes Hann/hop = win/4
    /// (or win/2) sum to a constant.
    pub fn coefficients(self, len: usize) -> Vec<f64> {
        let n = len as f64;
        (0..len)
            .map(|i| {
                let phase = 2.0 * PI * i as f64 / n;
                match self {
                    Window::Hann => 0.5 - 0.5 * phase.cos(),
                    Window::Hamming => 0.54 - 0.46 * phase.cos(),
                    Window::Rectangular => 1.0,
                }
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StftConfig {
    pub fft_size: usize,
    pub hop: usize,
    pub win_length: usize,
    #[serde(default)]
    pub window: Window,
    /// Reflect-pad `win_length / 2` samples on both ends before framing.
    #[serde(default)]
    pub center: bool,
}

impl Default for StftConfig {
    fn default() -> Self {
        Self {
            fft_size: 512,
            hop: 128,
            win_length: 512,
            window: Window::Hann,
            center: false,
        }
    }
}

impl StftConfig {
    pub fn new(fft_size: usize, hop: usize, win_length: usize) -> Result<Self> {
        let cfg = Self {
            fft_size,
            hop,
            win_length,
            window: Window::Hann,
            center: false,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !self.fft_size.is_power_of_two() {
            return Err(Error::Config(format!(
                "fft size {} is not a power of two",
                self.fft_size
            )));
        }
        if self.hop == 0 || self.hop > self.win_length || self.win_length > self.fft_size {
            return Err(Error::Config(format!(
                "need 0 < hop ({}) <= win_length ({}) <= fft_size ({})",
                self.hop, self.win_length, self.fft_size
            )));
        }
        Ok(())
    }

    pub fn n_bins(&self) -> usize {
        self.fft_size / 2 + 1
    }

    pub fn window_coefficients(&self) -> Vec<f64> {
        self.window.coefficients(self.win_length)
    }

    /// Overlap-add constant of the analysis window, or a config error when
    /// shifted copies of the window do not sum to a constant.
    pub fn cola_constant(&self) -> Result<f64> {
        let w = self.window_coefficients();
        let mut sums = vec![0.0; self.hop];
        for (i, v) in w.iter().enumerate() {
            sums[i % self.hop] += v;
        }
        let mean = sums.iter().sum::<f64>() / sums.len() as f64;
        let worst = sums.iter().map(|s| (s - mean).abs()).fold(0.0, f64::max);
        if mean <= 0.0 || worst > 1e-10 * mean {
            return Err(Error::Config(format!(
                "{:?} window of length {} with hop {} is not constant-overlap-add",
                self.window, self.win_length, self.hop
            )));
        }
        Ok(mean)
    }

    pub fn n_frames(&self, len: usize) -> usize {
        let len = if self.center {
            len + 2 * (self.win_length / 2)
        } else {
            len
        };
        if len < self.win_length {
            0
        } else {
            (len - self.win_length) / self.hop + 1
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComplexSpectrogram {
    /// `F x (fft_size / 2 + 1)`.
    pub frames: Array2<Complex64>,
    pub config: StftConfig,
    pub sample_rate: u32,
}

impl ComplexSpectrogram {
    pub fn n_frames(&self) -> usize {
        self.frames.nrows()
    }

    pub fn magnitude(&self) -> Array2<f64> {
        self.frames.mapv(|c| c.norm_sqr().sqrt())
    }

    pub fn from_magnitude_phase(
        magnitude: &Array2<f64>,
        phase: &Array2<f64>,
        config: StftConfig,
        sample_rate: u32,
    ) -> Self {
        let frames = ndarray::Zip::from(magnitude)
            .and(phase)
            .map_collect(|&m, &p| Complex64::from_polar(m, p));
        Self {
            frames,
            config,
            sample_rate,
        }
    }

    /// Energy of frame `f` summed over the full (two-sided) spectrum and
    /// divided by `fft_size`, i.e. the windowed time-domain energy.
    pub fn frame_energy(&self, f: usize) -> f64 {
        let n = self.config.fft_size;
        let row = self.frames.row(f);
        let last = row.len() - 1;
        let total: f64 = row
            .iter()
            .enumerate()
            .map(|(k, c)| {
                let e = c.norm_sqr();
                if k == 0 || k == last {
                    e
                } else {
                    2.0 * e
                }
            })
            .sum();
        total / n as f64
    }
}

pub(crate) struct FftPair {
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
}

impl FftPair {
    pub(crate) fn new(n: usize) -> Self {
        let mut planner = FftPlanner::new();
        Self {
            forward: planner.plan_fft_forward(n),
            inverse: planner.plan_fft_inverse(n),
        }
    }
}

fn reflect_pad(x: &[f64], pad: usize) -> Result<Vec<f64>> {
    if pad == 0 {
        return Ok(x.to_vec());
    }
    if x.len() <= pad {
        return Err(Error::Length(format!(
            "centered framing needs more than {pad} samples, got {}",
            x.len()
        )));
    }
    let mut out = Vec::with_capacity(x.len() + 2 * pad);
    out.extend((1..=pad).rev().map(|i| x[i]));
    out.extend_from_slice(x);
    let n = x.len();
    out.extend((1..=pad).map(|i| x[n - 1 - i]));
    Ok(out)
}

pub fn stft(w: &Waveform, cfg: &StftConfig) -> Result<ComplexSpectrogram> {
    cfg.validate()?;
    let ffts = FftPair::new(cfg.fft_size);
    stft_with(w.samples(), w.sample_rate(), cfg, &ffts)
}

pub(crate) fn stft_with(
    samples: &[f64],
    sample_rate: u32,
    cfg: &StftConfig,
    ffts: &FftPair,
) -> Result<ComplexSpectrogram> {
    if samples.is_empty() {
        return Err(Error::EmptyInput("stft of an empty waveform".into()));
    }
    let padded;
    let x = if cfg.center {
        padded = reflect_pad(samples, cfg.win_length / 2)?;
        &padded[..]
    } else {
        samples
    };
    if x.len() < cfg.win_length {
        return Err(Error::EmptyInput(format!(
            "waveform of {} samples is shorter than the {}-sample window",
            x.len(),
            cfg.win_length
        )));
    }
    let n_frames = (x.len() - cfg.win_length) / cfg.hop + 1;
    let bins = cfg.n_bins();
    let window = cfg.window_coefficients();
    let mut frames = Array2::zeros((n_frames, bins));
    let mut buf = vec![Complex64::new(0.0, 0.0); cfg.fft_size];
    let mut scratch = vec![Complex64::new(0.0, 0.0); ffts.forward.get_inplace_scratch_len()];
    for f in 0..n_frames {
        let start = f * cfg.hop;
        buf.iter_mut().for_each(|c| *c = Complex64::new(0.0, 0.0));
        for (i, (&s, &wv)) in x[start..start + cfg.win_length]
            .iter()
            .zip(&window)
            .enumerate()
        {
            buf[i] = Complex64::new(s * wv, 0.0);
        }
        ffts.forward.process_with_scratch(&mut buf, &mut scratch);
        for k in 0..bins {
            frames[[f, k]] = buf[k];
        }
    }
    Ok(ComplexSpectrogram {
        frames,
        config: *cfg,
        sample_rate,
    })
}

/// Real-valued inverse FFT of each frame, truncated to `win_length`.
fn inverse_frames(s: &ComplexSpectrogram, ffts: &FftPair) -> Vec<Vec<f64>> {
    let cfg = &s.config;
    let n = cfg.fft_size;
    let bins = cfg.n_bins();
    let mut buf = vec![Complex64::new(0.0, 0.0); n];
    let mut scratch = vec![Complex64::new(0.0, 0.0); ffts.inverse.get_inplace_scratch_len()];
    s.frames
        .rows()
        .into_iter()
        .map(|row| {
            for k in 0..bins {
                buf[k] = row[k];
            }
            // Hermitian mirror; DC and Nyquist imaginary parts are dropped.
            buf[0].im = 0.0;
            buf[n / 2].im = 0.0;
            for k in 1..n / 2 {
                buf[n - k] = row[k].conj();
            }
            ffts.inverse.process_with_scratch(&mut buf, &mut scratch);
            buf[..cfg.win_length]
                .iter()
                .map(|c| c.re / n as f64)
                .collect()
        })
        .collect()
}

fn strip_center(cfg: &StftConfig, mut y: Vec<f64>) -> Vec<f64> {
    if cfg.center {
        let pad = cfg.win_length / 2;
        let end = y.len().saturating_sub(pad);
        y.truncate(end);
        y.drain(..pad.min(y.len()));
    }
    y
}

/// Plain overlap-add inverse, normalized by the window's COLA constant.
/// Output length is `(F - 1) * hop + win_length` (before removing centering).
pub fn istft(s: &ComplexSpectrogram) -> Result<Waveform> {
    let cfg = &s.config;
    cfg.validate()?;
    let cola = cfg.cola_constant()?;
    let ffts = FftPair::new(cfg.fft_size);
    let n_frames = s.n_frames();
    if n_frames == 0 {
        return Err(Error::EmptyInput("istft of a spectrogram with no frames".into()));
    }
    let len = (n_frames - 1) * cfg.hop + cfg.win_length;
    let mut y = vec![0.0; len];
    for (f, frame) in inverse_frames(s, &ffts).into_iter().enumerate() {
        let start = f * cfg.hop;
        for (i, v) in frame.into_iter().enumerate() {
            y[start + i] += v / cola;
        }
    }
    Waveform::new(strip_center(cfg, y), s.sample_rate)
}

/// Least-squares inverse (synthesis window = analysis window, normalized by
/// the summed squared window). This is the projection onto consistent
/// spectrograms that Griffin-Lim iterates with; it does not need COLA.
pub fn istft_least_squares(s: &ComplexSpectrogram) -> Result<Waveform> {
    let cfg = &s.config;
    cfg.validate()?;
    let ffts = FftPair::new(cfg.fft_size);
    Waveform::new(
        strip_center(cfg, istft_ls_with(s, &ffts)),
        s.sample_rate,
    )
}

pub(crate) fn istft_ls_with(s: &ComplexSpectrogram, ffts: &FftPair) -> Vec<f64> {
    let cfg = &s.config;
    let n_frames = s.n_frames();
    if n_frames == 0 {
        return Vec::new();
    }
    let window = cfg.window_coefficients();
    let len = (n_frames - 1) * cfg.hop + cfg.win_length;
    let mut y = vec![0.0; len];
    let mut norm = vec![0.0; len];
    for (f, frame) in inverse_frames(s, ffts).into_iter().enumerate() {
        let start = f * cfg.hop;
        for (i, v) in frame.into_iter().enumerate() {
            y[start + i] += v * window[i];
            norm[start + i] += window[i] * window[i];
        }
    }
    for (v, d) in y.iter_mut().zip(&norm) {
        if *d > 1e-10 {
            *v /= d;
        } else {
            *v = 0.0;
        }
    }
    y
}
