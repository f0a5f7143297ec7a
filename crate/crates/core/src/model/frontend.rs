use std::sync::Arc;

use ndarray::Array2;
use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::dsp::{MelFilterbank, Waveform, Window};
use crate::error::{Error, Result};

/// Power floor inside the logarithms.
pub const LOG_FLOOR: f64 = 1e-10;

/// Fixed framing front end: per-frame log-energy followed by log mel
/// filterbank energies.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FrontendConfig {
    pub sample_rate: u32,
    pub win: usize,
    pub hop: usize,
    pub n_filters: usize,
}

impl Default for FrontendConfig {
    fn default() -> Self {
        Self {
            sample_rate: 16000,
            win: 400,
            hop: 160,
            n_filters: 24,
        }
    }
}

impl FrontendConfig {
    /// 25 ms windows with a 10 ms hop at `sample_rate`.
    pub fn for_rate(sample_rate: u32) -> Self {
        Self {
            sample_rate,
            win: (sample_rate as usize * 25).div_ceil(1000),
            hop: (sample_rate as usize).div_ceil(100),
            ..Self::default()
        }
    }

    pub fn dim(&self) -> usize {
        self.n_filters + 1
    }

    pub fn n_frames(&self, len: usize) -> usize {
        if len < self.win {
            0
        } else {
            (len - self.win) / self.hop + 1
        }
    }

    /// Frames covering at most `secs` seconds.
    pub fn frames_in(&self, secs: f64) -> usize {
        self.n_frames((secs * self.sample_rate as f64).floor() as usize).max(1)
    }
}

pub struct Frontend {
    cfg: FrontendConfig,
    window: Vec<f64>,
    fft: Arc<dyn Fft<f64>>,
    filterbank: MelFilterbank,
}

impl Frontend {
    pub fn new(cfg: FrontendConfig) -> Result<Self> {
        if cfg.win == 0 || cfg.hop == 0 || cfg.n_filters == 0 {
            return Err(Error::Config("front end sizes must be positive".into()));
        }
        let fft_size = cfg.win.next_power_of_two();
        let filterbank = MelFilterbank::new(cfg.n_filters, fft_size, cfg.sample_rate, 0.0, cfg.sample_rate as f64 / 2.0)?;
        Ok(Self {
            cfg,
            window: Window::Hann.coefficients(cfg.win),
            fft: FftPlanner::new().plan_fft_forward(fft_size),
            filterbank,
        })
    }

    pub fn config(&self) -> &FrontendConfig {
        &self.cfg
    }

    /// `N x (n_filters + 1)` features, `N = (T - win) / hop + 1`.
    pub fn extract(&self, w: &Waveform) -> Result<Array2<f64>> {
        if w.sample_rate() != self.cfg.sample_rate {
            return Err(Error::Rate {
                rate: w.sample_rate(),
                what: format!("front end configured for {} Hz", self.cfg.sample_rate),
            });
        }
        let n = self.cfg.n_frames(w.len());
        if n == 0 {
            return Err(Error::Length(format!(
                "need at least {} samples for one frame, got {}",
                self.cfg.win,
                w.len()
            )));
        }
        let x = w.samples();
        let fft_size = self.fft.len();
        let weights = self.filterbank.weights();
        let mut out = Array2::zeros((n, self.cfg.dim()));
        let mut buf = vec![Complex64::new(0.0, 0.0); fft_size];
        let mut power = vec![0.0; fft_size / 2 + 1];
        for f in 0..n {
            let frame = &x[f * self.cfg.hop..f * self.cfg.hop + self.cfg.win];
            let energy: f64 = frame.iter().map(|v| v * v).sum();
            out[[f, 0]] = (energy + LOG_FLOOR).ln();
            buf.iter_mut().for_each(|c| *c = Complex64::new(0.0, 0.0));
            for (b, (s, w)) in buf.iter_mut().zip(frame.iter().zip(&self.window)) {
                b.re = s * w;
            }
            self.fft.process(&mut buf);
            for (p, c) in power.iter_mut().zip(&buf) {
                *p = c.norm_sqr();
            }
            for m in 0..self.cfg.n_filters {
                let e: f64 = weights.row(m).iter().zip(&power).map(|(a, b)| a * b).sum();
                out[[f, m + 1]] = (e + LOG_FLOOR).ln();
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn frame_count() {
        let fe = Frontend::new(FrontendConfig::default()).unwrap();
        let f = fe.extract(&Waveform::zeros(16000, 16000)).unwrap();
        assert_eq!(f.dim(), (98, 25));
        assert!(fe.extract(&Waveform::zeros(399, 16000)).is_err());
        assert_eq!(fe.extract(&Waveform::zeros(400, 16000)).unwrap().nrows(), 1);
        assert_eq!(FrontendConfig::default().frames_in(4.0), 398);
    }

    #[test]
    fn silence_is_the_log_floor() {
        let fe = Frontend::new(FrontendConfig::default()).unwrap();
        let f = fe.extract(&Waveform::zeros(2000, 16000)).unwrap();
        assert!(f.iter().all(|&v| v == LOG_FLOOR.ln()));
    }

    #[test]
    fn finite_on_random_input() {
        let fe = Frontend::new(FrontendConfig::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..5 {
            let w = Waveform::new((0..8000).map(|_| rng.random_range(-1.0..1.0)).collect(), 16000).unwrap();
            assert!(fe.extract(&w).unwrap().iter().all(|v| v.is_finite() && v.abs() < 1e6));
        }
    }

    #[test]
    fn tone_lands_in_its_band() {
        let fe = Frontend::new(FrontendConfig::default()).unwrap();
        let w = Waveform::new(
            (0..4000).map(|n| (2.0 * std::f64::consts::PI * 3000.0 * n as f64 / 16000.0).sin()).collect(),
            16000,
        )
        .unwrap();
        let f = fe.extract(&w).unwrap();
        let row = f.row(3);
        let best = (1..25).max_by(|&a, &b| row[a].partial_cmp(&row[b]).unwrap()).unwrap();
        let centres: Vec<f64> = (0..24)
            .map(|m| {
                let wts = fe.filterbank.weights().row(m).to_owned();
                let k = wts.iter().enumerate().max_by(|a, b| a.1.partial_cmp(b.1).unwrap()).unwrap().0;
                k as f64 * 16000.0 / 512.0
            })
            .collect();
        assert!((centres[best - 1] - 3000.0).abs() < 400.0, "{}", centres[best - 1]);
    }
}
