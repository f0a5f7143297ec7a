use std::f64::consts::PI;

use super::Waveform;
use crate::error::{Error, Result};

const KAISER_BETA: f64 = 8.0;
/// Zero crossings of the low-pass kernel on each side, so 32 taps per phase
/// when upsampling.
const ZERO_CROSSINGS: f64 = 16.0;
const MAX_FACTOR: u64 = 1024;

fn gcd(a: u64, b: u64) -> u64 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// Zeroth-order modified Bessel function of the first kind (power series).
fn bessel_i0(x: f64) -> f64 {
    let mut sum = 1.0;
    let mut term = 1.0;
    let q = x * x / 4.0;
    for k in 1..200 {
        term *= q / (k * k) as f64;
        sum += term;
        if term < sum * 1e-17 {
            break;
        }
    }
    sum
}

fn sinc(x: f64) -> f64 {
    if x == 0.0 {
        1.0
    } else {
        (PI * x).sin() / (PI * x)
    }
}

struct PolyphaseKernel {
    up: usize,
    down: usize,
    reach: isize,
    /// `up` rows of `2 * reach` taps.
    taps: Vec<Vec<f64>>,
}

impl PolyphaseKernel {
    fn new(up: usize, down: usize) -> Self {
        let cutoff = (up as f64 / down as f64).min(1.0);
        let half_width = ZERO_CROSSINGS / cutoff;
        let reach = half_width.ceil() as isize;
        let i0_beta = bessel_i0(KAISER_BETA);
        let taps = (0..up)
            .map(|p| {
                let frac = p as f64 / up as f64;
                (-reach + 1..=reach)
                    .map(|j| {
                        let t = frac + j as f64;
                        let u = t / half_width;
                        if u.abs() >= 1.0 {
                            0.0
                        } else {
                            let win = bessel_i0(KAISER_BETA * (1.0 - u * u).sqrt()) / i0_beta;
                            cutoff * sinc(cutoff * t) * win
                        }
                    })
                    .collect()
            })
            .collect();
        Self {
            up,
            down,
            reach,
            taps,
        }
    }

    fn apply(&self, x: &[f64], out_len: usize) -> Vec<f64> {
        let n = x.len() as isize;
        (0..out_len)
            .map(|m| {
                let pos = m * self.down;
                let base = (pos / self.up) as isize;
                let row = &self.taps[pos % self.up];
                let mut acc = 0.0;
                for (idx, &h) in row.iter().enumerate() {
                    let j = idx as isize - self.reach + 1;
                    let k = base - j;
                    if k >= 0 && k < n {
                        acc += x[k as usize] * h;
                    }
                }
                acc
            })
            .collect()
    }
}

/// Rational polyphase resampler with a Kaiser-windowed sinc (beta 8).
/// Output length is `round(len * target / source)`.
pub fn resample(w: &Waveform, target_sr: u32) -> Result<Waveform> {
    let source = w.sample_rate();
    if target_sr == 0 {
        return Err(Error::Parameter("target sample rate must be positive".into()));
    }
    if target_sr == source {
        return Ok(w.clone());
    }
    let g = gcd(source as u64, target_sr as u64);
    let (up, down) = (target_sr as u64 / g, source as u64 / g);
    if up > MAX_FACTOR || down > MAX_FACTOR {
        return Err(Error::UnsupportedRatio {
            from: source,
            to: target_sr,
        });
    }
    let out_len = ((w.len() as u128 * up as u128 + down as u128 / 2) / down as u128) as usize;
    let kernel = PolyphaseKernel::new(up as usize, down as usize);
    Waveform::new(kernel.apply(w.samples(), out_len), target_sr)
}
