use nalgebra::DMatrix;
use ndarray::Array2;

use super::stft::ComplexSpectrogram;
use crate::error::{Error, Result};

fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Triangular filters on the HTK mel scale, unit peak.
#[derive(Debug, Clone, PartialEq)]
pub struct MelFilterbank {
    n_mels: usize,
    fft_size: usize,
    /// `n_mels x (fft_size / 2 + 1)`.
    weights: Array2<f64>,
    fmin: f64,
    fmax: f64,
    sample_rate: u32,
}

impl MelFilterbank {
    pub fn new(n_mels: usize, fft_size: usize, sample_rate: u32, fmin: f64, fmax: f64) -> Result<Self> {
        if n_mels == 0 {
            return Err(Error::Parameter("filterbank needs at least one band".into()));
        }
        if !(fmin >= 0.0 && fmin < fmax && fmax <= sample_rate as f64 / 2.0) {
            return Err(Error::Parameter(format!(
                "need 0 <= fmin ({fmin}) < fmax ({fmax}) <= {}",
                sample_rate as f64 / 2.0
            )));
        }
        let bins = fft_size / 2 + 1;
        let (lo, hi) = (hz_to_mel(fmin), hz_to_mel(fmax));
        let edges: Vec<f64> = (0..n_mels + 2)
            .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (n_mels + 1) as f64))
            .collect();
        let bin_hz = sample_rate as f64 / fft_size as f64;
        let mut weights = Array2::zeros((n_mels, bins));
        for m in 0..n_mels {
            let (left, centre, right) = (edges[m], edges[m + 1], edges[m + 2]);
            for k in 0..bins {
                let f = k as f64 * bin_hz;
                let v = if f > left && f <= centre {
                    (f - left) / (centre - left)
                } else if f > centre && f < right {
                    (right - f) / (right - centre)
                } else {
                    0.0
                };
                weights[[m, k]] = v;
            }
            if weights.row(m).iter().all(|&v| v <= 0.0) {
                return Err(Error::Parameter(format!(
                    "mel band {m} ({left:.1}-{right:.1} Hz) falls between FFT bins; \
                     use fewer bands or a larger FFT"
                )));
            }
        }
        Ok(Self {
            n_mels,
            fft_size,
            weights,
            fmin,
            fmax,
            sample_rate,
        })
    }

    pub fn n_mels(&self) -> usize {
        self.n_mels
    }

    pub fn fft_size(&self) -> usize {
        self.fft_size
    }

    pub fn n_bins(&self) -> usize {
        self.weights.ncols()
    }

    pub fn weights(&self) -> &Array2<f64> {
        &self.weights
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn fmin(&self) -> f64 {
        self.fmin
    }

    pub fn fmax(&self) -> f64 {
        self.fmax
    }

    /// Moore-Penrose pseudo-inverse of the weight matrix, `bins x n_mels`.
    pub fn pseudo_inverse_matrix(&self) -> Result<Array2<f64>> {
        let (rows, cols) = self.weights.dim();
        let m = DMatrix::from_fn(rows, cols, |i, j| self.weights[[i, j]]);
        let svd = m.svd(true, true);
        let smax = svd.singular_values.max();
        let tol = smax * 1e-10;
        let rank = svd.singular_values.iter().filter(|&&s| s > tol).count();
        if rank < rows {
            return Err(Error::NumericalRank { rank, rows });
        }
        let pinv = svd
            .pseudo_inverse(tol)
            .map_err(|e| Error::Parameter(e.to_string()))?;
        Ok(Array2::from_shape_fn((cols, rows), |(i, j)| pinv[(i, j)]))
    }

    fn check_matches(&self, s: &ComplexSpectrogram) -> Result<()> {
        if s.config.fft_size != self.fft_size || s.sample_rate != self.sample_rate {
            return Err(Error::Shape(format!(
                "filterbank built for fft {} @ {} Hz, spectrogram is fft {} @ {} Hz",
                self.fft_size, self.sample_rate, s.config.fft_size, s.sample_rate
            )));
        }
        Ok(())
    }
}

/// `F x n_mels` mel magnitudes: each row is `weights . |bins|`.
pub fn mel_apply(s: &ComplexSpectrogram, fb: &MelFilterbank) -> Result<Array2<f64>> {
    fb.check_matches(s)?;
    Ok(s.magnitude().dot(&fb.weights.t()))
}

/// Least-squares magnitude estimate from mel magnitudes, clamped at zero.
pub fn mel_pseudo_inverse(mel: &Array2<f64>, fb: &MelFilterbank) -> Result<Array2<f64>> {
    if fb.n_mels < 8 {
        return Err(Error::Parameter(format!(
            "pseudo-inverse needs at least 8 mel bands, got {}",
            fb.n_mels
        )));
    }
    if mel.ncols() != fb.n_mels {
        return Err(Error::Shape(format!(
            "mel matrix has {} columns, filterbank has {} bands",
            mel.ncols(),
            fb.n_mels
        )));
    }
    let pinv = fb.pseudo_inverse_matrix()?;
    Ok(mel.dot(&pinv.t()).mapv(|v| v.max(0.0)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsp::StftConfig;
    use num_complex::Complex64;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn fb80() -> MelFilterbank {
        MelFilterbank::new(80, 1024, 16000, 0.0, 8000.0).unwrap()
    }

    fn spec(frames: Array2<Complex64>) -> ComplexSpectrogram {
        ComplexSpectrogram {
            frames,
            config: StftConfig::new(1024, 256, 1024).unwrap(),
            sample_rate: 16000,
        }
    }

    #[test]
    fn rows_are_nonnegative_and_nonempty() {
        let fb = fb80();
        for row in fb.weights().rows() {
            assert!(row.iter().all(|&v| v >= 0.0));
            assert!(row.iter().any(|&v| v > 0.0));
        }
    }

    #[test]
    fn too_many_bands_for_resolution_is_rejected() {
        assert!(MelFilterbank::new(128, 256, 16000, 0.0, 8000.0).is_err());
        assert!(MelFilterbank::new(20, 512, 16000, 100.0, 9000.0).is_err());
    }

    #[test]
    fn zero_spectrogram_gives_zero_mel() {
        let s = spec(Array2::zeros((4, 513)));
        let m = mel_apply(&s, &fb80()).unwrap();
        assert_eq!(m.dim(), (4, 80));
        assert!(m.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn unit_bin_selects_filterbank_column() {
        let fb = fb80();
        let k = 100;
        let mut frames = Array2::zeros((1, 513));
        frames[[0, k]] = Complex64::new(0.6, 0.8);
        let m = mel_apply(&spec(frames), &fb).unwrap();
        for j in 0..80 {
            assert_eq!(m[[0, j]], fb.weights()[[j, k]]);
        }
    }

    #[test]
    fn matches_naive_triple_loop() {
        let fb = fb80();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let frames = Array2::from_shape_fn((6, 513), |_| {
            Complex64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0))
        });
        let s = spec(frames.clone());
        let m = mel_apply(&s, &fb).unwrap();
        for f in 0..6 {
            for j in 0..80 {
                let mut acc = 0.0;
                for k in 0..513 {
                    acc += fb.weights()[[j, k]] * frames[[f, k]].norm_sqr().sqrt();
                }
                assert!((acc - m[[f, j]]).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn mismatched_spectrogram_is_a_shape_error() {
        let fb = MelFilterbank::new(40, 512, 16000, 0.0, 8000.0).unwrap();
        let s = spec(Array2::zeros((2, 513)));
        assert!(matches!(mel_apply(&s, &fb), Err(Error::Shape(_))));
    }

    #[test]
    fn pseudo_inverse_is_right_inverse_on_row_space() {
        let fb = fb80();
        let pinv = fb.pseudo_inverse_matrix().unwrap();
        let prod = fb.weights().dot(&pinv);
        for i in 0..80 {
            for j in 0..80 {
                let expect = if i == j { 1.0 } else { 0.0 };
                assert!((prod[[i, j]] - expect).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn smooth_envelope_survives_mel_roundtrip() {
        let fb = fb80();
        // A few smooth spectral envelopes (formant-like bumps on a tilt).
        for (a, b, c) in [(500.0, 1500.0, 2500.0), (300.0, 2200.0, 3000.0), (700.0, 1200.0, 2600.0)] {
            let env = Array2::from_shape_fn((1, 513), |(_, k)| {
                let f = k as f64 * 16000.0 / 1024.0;
                let bump = |c0: f64, w: f64| (-((f - c0) / w).powi(2)).exp();
                0.05 + bump(a, 300.0) + 0.6 * bump(b, 400.0) + 0.3 * bump(c, 500.0)
            });
            let frames = env.mapv(|m| Complex64::new(m, 0.0));
            let mel = mel_apply(&spec(frames), &fb).unwrap();
            let back = mel_pseudo_inverse(&mel, &fb).unwrap();
            let num: f64 = back.iter().zip(env.iter()).map(|(x, y)| (x - y).powi(2)).sum();
            let den: f64 = env.iter().map(|y| y * y).sum();
            let rel = (num / den).sqrt();
            assert!(rel < 0.2, "relative L2 error {rel}");
            assert!(back.iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn zero_mel_gives_zero_magnitude() {
        let back = mel_pseudo_inverse(&Array2::zeros((3, 80)), &fb80()).unwrap();
        assert!(back.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn pseudo_inverse_needs_eight_bands() {
        let fb = MelFilterbank::new(4, 512, 16000, 0.0, 8000.0).unwrap();
        assert!(mel_pseudo_inverse(&Array2::zeros((1, 4)), &fb).is_err());
    }
}
