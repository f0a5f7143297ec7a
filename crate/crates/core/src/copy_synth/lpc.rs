//! Linear-prediction analysis/resynthesis used by the source-filter channel.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::dsp::{Waveform, Window};
use crate::error::{Error, Result};

pub const PRE_EMPHASIS: f64 = 0.97;
pub const BANDWIDTH_EXPANSION: f64 = 0.996;
pub const F0_MIN: f64 = 60.0;
pub const F0_MAX: f64 = 400.0;
pub const VOICING_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, PartialEq)]
pub struct LpcAnalysis {
    /// Predictor coefficients `a_1..a_p` with `x[n] ~ sum_k a_k x[n - k]`,
    /// already bandwidth-expanded.
    pub coefficients: Vec<f64>,
    /// `sqrt(residual_energy)`, or 1 for silent frames.
    pub gain: f64,
    pub residual_energy: f64,
    pub frame_energy: f64,
    pub silent: bool,
}

impl LpcAnalysis {
    pub fn prediction_gain_db(&self) -> f64 {
        if self.silent || self.residual_energy <= 0.0 {
            0.0
        } else {
            10.0 * (self.frame_energy / self.residual_energy).log10()
        }
    }

    /// Denominator `1 - sum a_k z^-k` as polynomial coefficients.
    pub fn synthesis_denominator(&self) -> Vec<f64> {
        std::iter::once(1.0)
            .chain(self.coefficients.iter().map(|a| -a))
            .collect()
    }
}

fn autocorrelation(x: &[f64], max_lag: usize) -> Vec<f64> {
    (0..=max_lag)
        .map(|lag| x[..x.len() - lag].iter().zip(&x[lag..]).map(|(a, b)| a * b).sum())
        .collect()
}

/// Levinson-Durbin on the frame autocorrelation. The caller applies
/// pre-emphasis and windowing.
pub fn lpc_analyze(frame: &[f64], order: usize) -> Result<LpcAnalysis> {
    if order == 0 || frame.len() <= 2 * order {
        return Err(Error::Length(format!(
            "order-{order} analysis needs more than {} samples, got {}",
            2 * order,
            frame.len()
        )));
    }
    let r = autocorrelation(frame, order);
    if r[0] <= 1e-20 {
        return Ok(LpcAnalysis {
            coefficients: vec![0.0; order],
            gain: 1.0,
            residual_energy: 0.0,
            frame_energy: 0.0,
            silent: true,
        });
    }
    let mut a = vec![0.0; order + 1];
    let mut err = r[0] * (1.0 + 1e-9);
    for i in 1..=order {
        let acc: f64 = r[i] - (1..i).map(|j| a[j] * r[i - j]).sum::<f64>();
        let k = acc / err;
        let prev = a.clone();
        a[i] = k;
        for j in 1..i {
            a[j] = prev[j] - k * prev[i - j];
        }
        err *= 1.0 - k * k;
        if err <= 0.0 {
            err = r[0] * 1e-12;
            break;
        }
    }
    let coefficients = (1..=order)
        .map(|k| a[k] * BANDWIDTH_EXPANSION.powi(k as i32))
        .collect();
    Ok(LpcAnalysis {
        coefficients,
        gain: err.sqrt(),
        residual_energy: err,
        frame_energy: r[0],
        silent: false,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct F0Estimate {
    pub voiced: bool,
    /// Hz; 0 when unvoiced.
    pub f0: f64,
    /// Normalized autocorrelation at the selected lag.
    pub peak: f64,
}

impl F0Estimate {
    const UNVOICED: F0Estimate = F0Estimate {
        voiced: false,
        f0: 0.0,
        peak: 0.0,
    };
}

/// Normalized-autocorrelation pitch search over 60-400 Hz.
pub fn estimate_f0(frame: &[f64], sample_rate: u32) -> F0Estimate {
    let sr = sample_rate as f64;
    let min_lag = (sr / F0_MAX).floor().max(1.0) as usize;
    let max_lag = (sr / F0_MIN).ceil() as usize;
    if frame.len() < (0.025 * sr) as usize || frame.len() <= max_lag + 2 {
        return F0Estimate::UNVOICED;
    }
    let mean = frame.iter().sum::<f64>() / frame.len() as f64;
    let x: Vec<f64> = frame.iter().map(|v| v - mean).collect();
    let energy: f64 = x.iter().map(|v| v * v).sum();
    if energy <= 1e-12 * x.len() as f64 {
        return F0Estimate::UNVOICED;
    }
    let n = x.len();
    // Prefix sums of squares for the per-lag normalization.
    let mut cum = vec![0.0; n + 1];
    for i in 0..n {
        cum[i + 1] = cum[i] + x[i] * x[i];
    }
    let nacf: Vec<f64> = (0..=max_lag + 1)
        .map(|lag| {
            if lag < min_lag.saturating_sub(1) {
                return 0.0;
            }
            let dot: f64 = x[..n - lag].iter().zip(&x[lag..]).map(|(a, b)| a * b).sum();
            let e1 = cum[n - lag];
            let e2 = cum[n] - cum[lag];
            let d = (e1 * e2).sqrt();
            if d > 0.0 {
                dot / d
            } else {
                0.0
            }
        })
        .collect();
    let best = (min_lag..=max_lag).map(|l| nacf[l]).fold(f64::MIN, f64::max);
    // Shortest local maximum close to the global one guards against
    // picking a multiple of the true period.
    let lag = (min_lag..=max_lag)
        .find(|&l| {
            nacf[l] >= 0.97 * best
                && nacf[l] >= nacf[l - 1]
                && nacf[l] >= nacf[l + 1]
        })
        .unwrap_or_else(|| {
            (min_lag..=max_lag)
                .max_by(|&a, &b| nacf[a].partial_cmp(&nacf[b]).unwrap())
                .unwrap()
        });
    let peak = nacf[lag];
    if peak <= VOICING_THRESHOLD {
        return F0Estimate {
            voiced: false,
            f0: 0.0,
            peak,
        };
    }
    let (l, c, r) = (nacf[lag - 1], nacf[lag], nacf[lag + 1]);
    let denom = l - 2.0 * c + r;
    let shift = if denom.abs() > 1e-12 {
        (0.5 * (l - r) / denom).clamp(-0.5, 0.5)
    } else {
        0.0
    };
    F0Estimate {
        voiced: true,
        f0: sr / (lag as f64 + shift),
        peak,
    }
}

/// Frame-wise LPC vocoder: pulse-train (voiced) or white-noise (unvoiced)
/// excitation at the residual level, all-pole synthesis per frame, Hann
/// overlap-add, de-emphasis. Output length equals input length.
pub fn lpc_resynthesize(
    w: &Waveform,
    order: usize,
    frame_ms: f64,
    hop_ms: f64,
    seed: u64,
) -> Result<Waveform> {
    let sr = w.sample_rate() as f64;
    let frame_len = (frame_ms * sr / 1000.0).round() as usize;
    let hop = (hop_ms * sr / 1000.0).round() as usize;
    if hop == 0 || hop > frame_len {
        return Err(Error::Parameter(format!(
            "need 0 < hop ({hop_ms} ms) <= frame ({frame_ms} ms)"
        )));
    }
    if frame_len <= 2 * order {
        return Err(Error::Length(format!(
            "{frame_ms} ms frames are too short for order {order}"
        )));
    }
    let x = w.samples();
    let n = x.len();
    let mut emphasized = vec![0.0; n];
    for i in 0..n {
        emphasized[i] = x[i] - if i > 0 { PRE_EMPHASIS * x[i - 1] } else { 0.0 };
    }
    let window = Window::Hann.coefficients(frame_len);
    // Symmetric taper for synthesis so frame edges cross-fade to zero.
    let taper: Vec<f64> = (0..frame_len)
        .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * (i as f64 + 0.5) / frame_len as f64).cos())
        .collect();
    let win_energy: f64 = window.iter().map(|v| v * v).sum();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_frames = n.div_ceil(hop).max(1);
    let total = (n_frames - 1) * hop + frame_len;
    let mut out = vec![0.0; total];
    let mut norm = vec![0.0; total];
    let mut seg = vec![0.0; frame_len];
    let mut raw = vec![0.0; frame_len];
    for f in 0..n_frames {
        let start = f * hop;
        for i in 0..frame_len {
            let idx = start + i;
            let (e, r) = if idx < n { (emphasized[idx], x[idx]) } else { (0.0, 0.0) };
            seg[i] = e * window[i];
            raw[i] = r;
        }
        let lpc = lpc_analyze(&seg, order)?;
        for i in 0..frame_len {
            norm[start + i] += taper[i];
        }
        if lpc.silent {
            continue;
        }
        let residual_rms = (lpc.residual_energy / win_energy).sqrt();
        let pitch = estimate_f0(&raw, w.sample_rate());
        let mut excitation = vec![0.0; frame_len];
        if pitch.voiced {
            let period = sr / pitch.f0;
            let amp = residual_rms * period.sqrt();
            // Pulse grid anchored to absolute time, so consecutive frames agree.
            let mut t = (start as f64 / period).ceil() * period - start as f64;
            while (t.round() as usize) < frame_len {
                excitation[t.round() as usize] = amp;
                t += period;
            }
        } else {
            for v in excitation.iter_mut() {
                let g: f64 = StandardNormal.sample(&mut rng);
                *v = residual_rms * g;
            }
        }
        // All-pole synthesis 1 / (1 - sum a_k z^-k), zero initial state.
        let a = &lpc.coefficients;
        let mut y = vec![0.0; frame_len];
        for i in 0..frame_len {
            let mut acc = excitation[i];
            for (k, ak) in a.iter().enumerate() {
                if i > k {
                    acc += ak * y[i - k - 1];
                }
            }
            y[i] = acc;
        }
        for i in 0..frame_len {
            out[start + i] += y[i] * taper[i];
        }
    }
    for (v, d) in out.iter_mut().zip(&norm) {
        if *d > 1e-6 {
            *v /= d;
        }
    }
    out.truncate(n);
    for i in 1..out.len() {
        out[i] += PRE_EMPHASIS * out[i - 1];
    }
    Waveform::new(out, w.sample_rate())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use std::f64::consts::PI;

    fn ar2(len: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut x = vec![0.0; len + 200];
        for n in 2..x.len() {
            let e: f64 = StandardNormal.sample(&mut rng);
            x[n] = 1.5 * x[n - 1] - 0.7 * x[n - 2] + e;
        }
        x.split_off(200)
    }

    #[test]
    fn recovers_ar2_coefficients() {
        let x = ar2(8000, 1);
        let win = Window::Hann.coefficients(x.len());
        let seg: Vec<f64> = x.iter().zip(&win).map(|(a, b)| a * b).collect();
        let lpc = lpc_analyze(&seg, 2).unwrap();
        assert!((lpc.coefficients[0] - 1.5).abs() < 0.05, "{:?}", lpc.coefficients);
        assert!((lpc.coefficients[1] + 0.7).abs() < 0.05, "{:?}", lpc.coefficients);
    }

    #[test]
    fn white_noise_has_no_prediction_gain() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x: Vec<f64> = (0..4000).map(|_| StandardNormal.sample(&mut rng)).collect();
        let win = Window::Hann.coefficients(x.len());
        let seg: Vec<f64> = x.iter().zip(&win).map(|(a, b)| a * b).collect();
        let lpc = lpc_analyze(&seg, 16).unwrap();
        assert!(lpc.residual_energy >= 0.9 * lpc.frame_energy);
        assert!(lpc.prediction_gain_db() < 0.5);
    }

    /// Durand-Kerner roots of a monic polynomial, independent of the
    /// analysis code.
    fn roots(monic: &[f64]) -> Vec<num_complex::Complex64> {
        use num_complex::Complex64 as C;
        let deg = monic.len() - 1;
        let eval = |z: C| monic.iter().fold(C::new(0.0, 0.0), |acc, &c| acc * z + c);
        let mut zs: Vec<C> = (0..deg).map(|k| C::from_polar(0.9, 0.4 + 2.0 * PI * k as f64 / deg as f64)).collect();
        for _ in 0..2000 {
            for i in 0..deg {
                let mut den = C::new(1.0, 0.0);
                for j in 0..deg {
                    if i != j {
                        den *= zs[i] - zs[j];
                    }
                }
                let step = eval(zs[i]) / den;
                zs[i] -= step;
            }
        }
        zs
    }

    #[test]
    fn synthesis_poles_inside_unit_circle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..5 {
            let f = rng.random_range(100.0..3000.0);
            let x: Vec<f64> = (0..400)
                .map(|n| (2.0 * PI * f * n as f64 / 16000.0).sin() + 0.01 * rng.random_range(-1.0..1.0))
                .collect();
            let win = Window::Hann.coefficients(400);
            let seg: Vec<f64> = x.iter().zip(&win).map(|(a, b)| a * b).collect();
            let lpc = lpc_analyze(&seg, 16).unwrap();
            for z in roots(&lpc.synthesis_denominator()) {
                assert!(z.norm() < 1.0, "pole radius {}", z.norm());
            }
        }
    }

    #[test]
    fn silent_frame_is_flagged() {
        let lpc = lpc_analyze(&[0.0; 400], 16).unwrap();
        assert!(lpc.silent);
        assert_eq!(lpc.gain, 1.0);
        assert!(lpc.coefficients.iter().all(|&a| a == 0.0));
        assert!(lpc_analyze(&[0.0; 30], 16).is_err());
    }

    #[test]
    fn f0_of_sine_noise_and_silence() {
        let sine: Vec<f64> = (0..400).map(|n| (2.0 * PI * 200.0 * n as f64 / 16000.0).sin()).collect();
        let est = estimate_f0(&sine, 16000);
        assert!(est.voiced);
        assert!((est.f0 - 200.0).abs() <= 2.0, "{}", est.f0);

        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let noise: Vec<f64> = (0..400).map(|_| rng.random_range(-1.0..1.0)).collect();
        assert!(!estimate_f0(&noise, 16000).voiced);
        assert!(!estimate_f0(&[0.0; 400], 16000).voiced);
    }

    #[test]
    fn f0_across_range() {
        for f0 in [65.0, 90.0, 133.0, 180.0, 250.0, 390.0] {
            let x: Vec<f64> = (0..640)
                .map(|n| {
                    let t = n as f64 / 16000.0;
                    (1..4).map(|h| (2.0 * PI * f0 * h as f64 * t).sin() / h as f64).sum()
                })
                .collect();
            let est = estimate_f0(&x, 16000);
            assert!(est.voiced);
            assert!((est.f0 - f0).abs() / f0 < 0.02, "{f0}: {}", est.f0);
        }
    }

    #[test]
    fn zero_input_resynthesizes_to_silence() {
        let w = Waveform::zeros(8000, 16000);
        let y = lpc_resynthesize(&w, 16, 25.0, 10.0, 0).unwrap();
        assert_eq!(y.len(), 8000);
        assert!(y.rms() < 1e-4);
    }
}
