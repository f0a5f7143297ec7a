use std::f64::consts::PI;

use ndarray::Array2;
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dsp::stft::{istft_ls_with, stft_with, FftPair};
use crate::dsp::{ComplexSpectrogram, StftConfig, Waveform};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PhaseInit {
    Zero,
    Random { seed: u64 },
}

#[derive(Debug, Clone)]
pub struct GriffinLimOutput {
    pub waveform: Waveform,
    /// Spectral convergence `|| |STFT(y_i)| - M || / ||M||` after each iteration.
    pub convergence: Vec<f64>,
}

/// Momentum of the accelerated update (0 gives the classic algorithm).
pub const MOMENTUM: f64 = 0.99;

/// Phase reconstruction by alternating projections between the target
/// magnitude and the set of consistent spectrograms, with the accelerated
/// (momentum) update of Perraudin et al.
pub fn griffin_lim(
    magnitude: &Array2<f64>,
    cfg: &StftConfig,
    iters: usize,
    init: PhaseInit,
    sample_rate: u32,
) -> Result<GriffinLimOutput> {
    cfg.validate()?;
    if iters == 0 {
        return Err(Error::Parameter("griffin-lim needs at least one iteration".into()));
    }
    if magnitude.ncols() != cfg.n_bins() {
        return Err(Error::Shape(format!(
            "magnitude has {} bins, config expects {}",
            magnitude.ncols(),
            cfg.n_bins()
        )));
    }
    if magnitude.nrows() == 0 {
        return Err(Error::EmptyInput("magnitude has no frames".into()));
    }
    let phase = match init {
        PhaseInit::Zero => Array2::zeros(magnitude.dim()),
        PhaseInit::Random { seed } => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            Array2::from_shape_simple_fn(magnitude.dim(), || rng.random_range(-PI..PI))
        }
    };
    let ffts = FftPair::new(cfg.fft_size);
    let mut spec = ComplexSpectrogram::from_magnitude_phase(magnitude, &phase, *cfg, sample_rate);
    // Frames are re-analysed without centring; the caller strips padding.
    let mut analysis = *cfg;
    analysis.center = false;
    spec.config = analysis;

    let mut convergence = Vec::with_capacity(iters);
    let target_energy: f64 = magnitude.iter().map(|v| v * v).sum();
    let mut signal = Vec::new();
    let mut previous: Option<Array2<Complex64>> = None;
    for _ in 0..iters {
        signal = istft_ls_with(&spec, &ffts);
        let rebuilt = stft_with(&signal, sample_rate, &analysis, &ffts)?;
        let mut err = 0.0;
        let first = previous.is_none();
        let prev = previous.get_or_insert_with(|| rebuilt.frames.clone());
        ndarray::Zip::from(&mut spec.frames)
            .and(prev)
            .and(&rebuilt.frames)
            .and(magnitude)
            .for_each(|s, p, &c, &m| {
                err += (c.norm_sqr().sqrt() - m).powi(2);
                let t = if first { c } else { c + (c - *p) * MOMENTUM };
                *p = c;
                let n = t.norm_sqr().sqrt();
                *s = if n > 1e-12 { t * (m / n) } else { Complex64::new(m, 0.0) };
            });
        convergence.push(if target_energy == 0.0 { 0.0 } else { (err / target_energy).sqrt() });
    }
    if cfg.center {
        let pad = cfg.win_length / 2;
        let end = signal.len().saturating_sub(pad);
        signal.truncate(end);
        signal.drain(..pad.min(signal.len()));
    }
    Ok(GriffinLimOutput {
        waveform: Waveform::new(signal, sample_rate)?,
        convergence,
    })
}
