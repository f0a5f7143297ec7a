use std::f64::consts::PI;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use super::Waveform;
use crate::error::{Error, Result};

/// One second-order section, `a[0] == 1`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Biquad {
    pub b: [f64; 3],
    pub a: [f64; 3],
}

impl Biquad {
    pub const IDENTITY: Biquad = Biquad {
        b: [1.0, 0.0, 0.0],
        a: [1.0, 0.0, 0.0],
    };

    /// Narrow notch at `freq` with quality factor `q`, unity gain away from it.
    pub fn notch(freq: f64, q: f64, sample_rate: f64) -> Self {
        let w0 = 2.0 * PI * freq / sample_rate;
        let alpha = w0.sin() / (2.0 * q);
        let a0 = 1.0 + alpha;
        Biquad {
            b: [1.0 / a0, -2.0 * w0.cos() / a0, 1.0 / a0],
            a: [1.0, -2.0 * w0.cos() / a0, (1.0 - alpha) / a0],
        }
    }

    pub fn response(&self, z: Complex64) -> Complex64 {
        let zi = z.inv();
        let num = self.b[0] + self.b[1] * zi + self.b[2] * zi * zi;
        let den = self.a[0] + self.a[1] * zi + self.a[2] * zi * zi;
        num / den
    }

    pub fn poles(&self) -> [Complex64; 2] {
        quadratic_roots(self.a[0], self.a[1], self.a[2])
    }
}

fn quadratic_roots(a: f64, b: f64, c: f64) -> [Complex64; 2] {
    if a == 0.0 {
        // First-order section stored as a degenerate quadratic.
        return [Complex64::new(0.0, 0.0); 2];
    }
    if c == 0.0 {
        return [Complex64::new(-b / a, 0.0), Complex64::new(0.0, 0.0)];
    }
    let disc = Complex64::new(b * b - 4.0 * a * c, 0.0).sqrt();
    [(-b + disc) / (2.0 * a), (-b - disc) / (2.0 * a)]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiquadCascade {
    pub sections: Vec<Biquad>,
}

impl BiquadCascade {
    pub fn identity() -> Self {
        Self {
            sections: vec![Biquad::IDENTITY],
        }
    }

    pub fn order(&self) -> usize {
        2 * self.sections.len()
    }

    pub fn response_at(&self, freq: f64, sample_rate: f64) -> Complex64 {
        let z = Complex64::from_polar(1.0, 2.0 * PI * freq / sample_rate);
        self.sections
            .iter()
            .fold(Complex64::new(1.0, 0.0), |acc, s| acc * s.response(z))
    }

    pub fn magnitude_db_at(&self, freq: f64, sample_rate: f64) -> f64 {
        20.0 * self.response_at(freq, sample_rate).norm().log10()
    }

    pub fn max_pole_radius(&self) -> f64 {
        self.sections
            .iter()
            .flat_map(|s| s.poles())
            .map(|p| p.norm())
            .fold(0.0, f64::max)
    }

    pub fn is_stable(&self) -> bool {
        self.max_pole_radius() < 1.0
    }

    /// Causal filtering with zero initial state (transposed direct form II).
    pub fn lfilter(&self, x: &[f64]) -> Vec<f64> {
        let mut y = x.to_vec();
        for s in &self.sections {
            let (mut z1, mut z2) = (0.0, 0.0);
            for v in y.iter_mut() {
                let input = *v;
                let out = s.b[0] * input + z1;
                z1 = s.b[1] * input - s.a[1] * out + z2;
                z2 = s.b[2] * input - s.a[2] * out;
                *v = out;
            }
        }
        y
    }
}

fn prewarp(freq: f64, fs: f64) -> f64 {
    2.0 * fs * (PI * freq / fs).tan()
}

fn bilinear(s: Complex64, fs: f64) -> Complex64 {
    (2.0 * fs + s) / (2.0 * fs - s)
}

/// Left-half-plane poles of the unit-cutoff analog Butterworth prototype.
fn prototype_poles(n: usize) -> Vec<Complex64> {
    (0..n)
        .map(|k| {
            let theta = PI * (2 * k + n + 1) as f64 / (2 * n) as f64;
            Complex64::from_polar(1.0, theta)
        })
        .collect()
}

/// Groups digital poles into conjugate pairs (or pairs of real poles).
/// A leftover real pole is returned separately.
fn pair_poles(poles: &[Complex64]) -> (Vec<[Complex64; 2]>, Option<Complex64>) {
    let tol = 1e-10;
    let mut pairs = Vec::new();
    let mut reals: Vec<f64> = Vec::new();
    for p in poles {
        if p.im > tol {
            pairs.push([*p, p.conj()]);
        } else if p.im.abs() <= tol {
            reals.push(p.re);
        }
    }
    reals.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mut it = reals.chunks_exact(2);
    for c in it.by_ref() {
        pairs.push([Complex64::new(c[0], 0.0), Complex64::new(c[1], 0.0)]);
    }
    let rest = it.remainder().first().map(|&r| Complex64::new(r, 0.0));
    // Deterministic section order: lowest pole radius first.
    pairs.sort_by(|a, b| a[0].norm().partial_cmp(&b[0].norm()).unwrap());
    (pairs, rest)
}

fn denominator(pair: &[Complex64; 2]) -> [f64; 3] {
    [1.0, -(pair[0] + pair[1]).re, (pair[0] * pair[1]).re]
}

/// Digital Butterworth band-stop of total order `order` (even; `order / 2`
/// second-order sections), via the analog low-pass to band-stop transform
/// and the bilinear transform with pre-warped edges. Each section has unit
/// gain at DC.
pub fn design_butterworth_bandstop(order: usize, f_lo: f64, f_hi: f64, sr: f64) -> Result<BiquadCascade> {
    if order == 0 || !order.is_multiple_of(2) {
        return Err(Error::Parameter(format!(
            "band-stop order must be even and positive, got {order}"
        )));
    }
    if !(f_lo > 0.0 && f_lo < f_hi && f_hi < sr / 2.0) {
        return Err(Error::Parameter(format!(
            "band edges must satisfy 0 < {f_lo} < {f_hi} < {}",
            sr / 2.0
        )));
    }
    let n = order / 2;
    let (w1, w2) = (prewarp(f_lo, sr), prewarp(f_hi, sr));
    let bw = w2 - w1;
    let w0_sq = w1 * w2;
    let mut poles = Vec::with_capacity(2 * n);
    for p in prototype_poles(n) {
        // s^2 - (bw / p) s + w0^2 = 0
        let half = bw / (2.0 * p);
        let disc = (half * half - w0_sq).sqrt();
        poles.push(bilinear(half + disc, sr));
        poles.push(bilinear(half - disc, sr));
    }
    let zero = bilinear(Complex64::new(0.0, w0_sq.sqrt()), sr);
    let num = [1.0, -2.0 * zero.re, 1.0];
    let (pairs, rest) = pair_poles(&poles);
    debug_assert!(rest.is_none());
    let sections = pairs
        .iter()
        .map(|pair| {
            let a = denominator(pair);
            let g = a.iter().sum::<f64>() / num.iter().sum::<f64>();
            Biquad {
                b: [num[0] * g, num[1] * g, num[2] * g],
                a,
            }
        })
        .collect();
    Ok(BiquadCascade { sections })
}

/// Digital Butterworth low-pass of the given order (odd orders get one
/// first-order section). Unit DC gain.
pub fn design_butterworth_lowpass(order: usize, cutoff: f64, sr: f64) -> Result<BiquadCascade> {
    if order == 0 {
        return Err(Error::Parameter("low-pass order must be positive".into()));
    }
    if !(cutoff > 0.0 && cutoff < sr / 2.0) {
        return Err(Error::Parameter(format!(
            "cutoff must satisfy 0 < {cutoff} < {}",
            sr / 2.0
        )));
    }
    let wc = prewarp(cutoff, sr);
    let poles: Vec<Complex64> = prototype_poles(order)
        .into_iter()
        .map(|p| bilinear(p * wc, sr))
        .collect();
    let (pairs, rest) = pair_poles(&poles);
    let mut sections: Vec<Biquad> = pairs
        .iter()
        .map(|pair| {
            let a = denominator(pair);
            let g = a.iter().sum::<f64>() / 4.0;
            Biquad {
                b: [g, 2.0 * g, g],
                a,
            }
        })
        .collect();
    if let Some(p) = rest {
        let a = [1.0, -p.re, 0.0];
        let g = (1.0 - p.re) / 2.0;
        sections.push(Biquad { b: [g, g, 0.0], a });
    }
    Ok(BiquadCascade { sections })
}

/// Samples after which the slowest pole has decayed below 1e-16.
fn settle_len(c: &BiquadCascade) -> usize {
    let r = c.max_pole_radius();
    if r <= 0.0 {
        return 0;
    }
    (-16.0 * std::f64::consts::LN_10 / r.ln()).ceil() as usize
}

/// Zero-phase filtering: forward pass, reverse, second pass, reverse.
///
/// The input is extended at both ends by odd reflection. The extension is at
/// least `3 * order` samples and is lengthened (up to `len - 1`) until the
/// slowest pole has settled, so the result does not depend on the direction
/// the signal is traversed in.
pub fn filtfilt(c: &BiquadCascade, w: &Waveform) -> Result<Waveform> {
    let x = w.samples();
    let min_len = 3 * c.order();
    if x.len() <= min_len {
        return Err(Error::Length(format!(
            "zero-phase filtering of an order-{} cascade needs more than {min_len} samples, got {}",
            c.order(),
            x.len()
        )));
    }
    let pad = min_len.max(settle_len(c)).min(x.len() - 1);
    let n = x.len();
    let mut ext = Vec::with_capacity(n + 2 * pad);
    ext.extend((1..=pad).rev().map(|i| 2.0 * x[0] - x[i]));
    ext.extend_from_slice(x);
    ext.extend((1..=pad).map(|i| 2.0 * x[n - 1] - x[n - 1 - i]));

    let mut y = c.lfilter(&ext);
    y.reverse();
    let mut y = c.lfilter(&y);
    y.reverse();
    Ok(w.with_samples(y[pad..pad + n].to_vec()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn sine(freq: f64, len: usize, sr: u32) -> Waveform {
        Waveform::new(
            (0..len)
                .map(|n| (2.0 * PI * freq * n as f64 / sr as f64).sin())
                .collect(),
            sr,
        )
        .unwrap()
    }

    fn rms_trimmed(x: &[f64], trim: usize) -> f64 {
        crate::dsp::rms(&x[trim..x.len() - trim])
    }

    #[test]
    fn bandstop_has_deep_notch_and_flat_passband() {
        let c = design_butterworth_bandstop(10, 2000.0, 3000.0, 16000.0).unwrap();
        assert_eq!(c.sections.len(), 5);
        // Evaluated on the unit circle.
        assert!(c.magnitude_db_at(2500.0, 16000.0) <= -60.0);
        assert!(c.magnitude_db_at(0.0, 16000.0).abs() < 0.5);
        assert!(c.magnitude_db_at(7999.0, 16000.0).abs() < 0.5);
    }

    #[test]
    fn bandstop_poles_are_inside_unit_circle() {
        let c = design_butterworth_bandstop(10, 2000.0, 3000.0, 16000.0).unwrap();
        for s in &c.sections {
            for p in s.poles() {
                assert!(p.norm() < 1.0);
            }
            assert_eq!(s.a[0], 1.0);
        }
    }

    #[test]
    fn bandstop_rejects_bad_edges() {
        for (lo, hi) in [(0.0, 100.0), (3000.0, 2000.0), (1000.0, 8000.0), (-5.0, 10.0)] {
            assert!(design_butterworth_bandstop(10, lo, hi, 16000.0).is_err());
        }
        assert!(design_butterworth_bandstop(7, 1000.0, 2000.0, 16000.0).is_err());
    }

    #[test]
    fn lowpass_response() {
        for order in [1, 2, 5, 8] {
            let c = design_butterworth_lowpass(order, 3000.0, 16000.0).unwrap();
            assert!(c.is_stable());
            assert!(c.magnitude_db_at(0.0, 16000.0).abs() < 1e-9);
            assert!((c.magnitude_db_at(3000.0, 16000.0) + 3.0103).abs() < 0.01);
        }
    }

    #[test]
    fn identity_cascade_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let w = Waveform::new((0..1000).map(|_| rng.random_range(-1.0..1.0)).collect(), 16000).unwrap();
        let y = filtfilt(&BiquadCascade::identity(), &w).unwrap();
        assert_eq!(y, w);
    }

    #[test]
    fn reversal_symmetry() {
        let c = design_butterworth_bandstop(10, 2000.0, 3000.0, 16000.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let w = Waveform::new((0..16000).map(|_| rng.random_range(-1.0..1.0)).collect(), 16000).unwrap();
        let a = filtfilt(&c, &w.reversed()).unwrap().reversed();
        let b = filtfilt(&c, &w).unwrap();
        let worst = a
            .samples()
            .iter()
            .zip(b.samples())
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max);
        assert!(worst < 1e-9, "{worst}");
    }

    #[test]
    fn stopband_sine_is_attenuated() {
        let c = design_butterworth_bandstop(10, 2000.0, 3000.0, 16000.0).unwrap();
        let w = sine(2500.0, 16000, 16000);
        let y = filtfilt(&c, &w).unwrap();
        let db = 20.0 * (rms_trimmed(y.samples(), 100) / rms_trimmed(w.samples(), 100)).log10();
        assert!(db <= -40.0, "{db}");
    }

    #[test]
    fn zero_group_delay_on_narrow_notch() {
        let c = design_butterworth_bandstop(4, 3900.0, 4100.0, 16000.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let w = Waveform::new((0..8000).map(|_| rng.random_range(-1.0..1.0)).collect(), 16000).unwrap();
        let y = filtfilt(&c, &w).unwrap();
        let xc = |lag: isize| -> f64 {
            (200..7800)
                .map(|i| w.samples()[i] * y.samples()[(i as isize + lag) as usize])
                .sum()
        };
        let best = (-20..=20).max_by(|&a, &b| xc(a).partial_cmp(&xc(b)).unwrap()).unwrap();
        assert_eq!(best, 0);
    }

    #[test]
    fn too_short_for_filtfilt() {
        let c = design_butterworth_bandstop(10, 2000.0, 3000.0, 16000.0).unwrap();
        assert!(matches!(filtfilt(&c, &Waveform::zeros(30, 16000)), Err(Error::Length(_))));
    }

    proptest! {
        #[test]
        fn bandstop_always_stable(lo in 50.0f64..6000.0, width in 20.0f64..1900.0, half in 1usize..8) {
            let hi = (lo + width).min(7900.0);
            prop_assume!(hi > lo);
            let c = design_butterworth_bandstop(2 * half, lo, hi, 16000.0).unwrap();
            prop_assert!(c.is_stable());
            prop_assert_eq!(c.sections.len(), half);
        }
    }
}
