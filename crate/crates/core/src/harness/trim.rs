use log::warn;

use crate::dsp::Waveform;

pub const DEFAULT_GATE_DB: f64 = 40.0;
const FRAME_SECS: f64 = 0.02;
const HOP_SECS: f64 = 0.01;
const STUB_SECS: f64 = 0.1;

/// Removes leading and trailing frames whose energy is more than `gate_db`
/// below the loudest frame. The interior is left untouched.
pub fn trim_nonspeech(w: &Waveform, gate_db: f64) -> Waveform {
    let sr = w.sample_rate() as f64;
    let win = (FRAME_SECS * sr).round() as usize;
    let hop = (HOP_SECS * sr).round() as usize;
    if w.len() <= win {
        return w.clone();
    }
    let x = w.samples();
    let n_frames = (x.len() - win) / hop + 1;
    let energy: Vec<f64> = (0..n_frames)
        .map(|f| x[f * hop..f * hop + win].iter().map(|v| v * v).sum())
        .collect();
    let max = energy.iter().cloned().fold(0.0, f64::max);
    if max <= 0.0 {
        let stub = ((STUB_SECS * sr) as usize).min(x.len());
        let start = (x.len() - stub) / 2;
        warn!("no frame above the trimming gate; keeping a centered {STUB_SECS} s stub");
        return w.slice(start, start + stub);
    }
    let threshold = max * 10f64.powf(-gate_db / 10.0);
    let first = energy.iter().position(|&e| e >= threshold).expect("loudest frame passes");
    let last = energy.iter().rposition(|&e| e >= threshold).expect("loudest frame passes");
    let start = first * hop;
    let end = if last + 1 == n_frames { x.len() } else { last * hop + win };
    if start == 0 && end == x.len() {
        return w.clone();
    }
    w.slice(start, end)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn padded_tone(sr: u32) -> Waveform {
        let n = sr as usize;
        let mut x = vec![0.0; n / 2];
        x.extend((0..n).map(|i| 0.5 * (2.0 * std::f64::consts::PI * 440.0 * i as f64 / sr as f64).sin()));
        x.extend(vec![0.0; n / 2]);
        Waveform::new(x, sr).unwrap()
    }

    #[test]
    fn removes_silent_edges() {
        let w = padded_tone(16000);
        let t = trim_nonspeech(&w, DEFAULT_GATE_DB);
        assert!((t.duration_secs() - 1.0).abs() <= 0.04, "{}", t.duration_secs());
    }

    #[test]
    fn idempotent() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let w = padded_tone(16000);
        let once = trim_nonspeech(&w, DEFAULT_GATE_DB);
        assert_eq!(trim_nonspeech(&once, DEFAULT_GATE_DB), once);

        let noisy: Vec<f64> = w.samples().iter().map(|v| v + 1e-4 * rng.random_range(-1.0..1.0)).collect();
        let w = Waveform::new(noisy, 16000).unwrap();
        let once = trim_nonspeech(&w, DEFAULT_GATE_DB);
        assert_eq!(trim_nonspeech(&once, DEFAULT_GATE_DB), once);
    }

    #[test]
    fn loud_throughout_is_unchanged() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let w = Waveform::new((0..8000).map(|_| rng.random_range(-0.5..0.5)).collect(), 16000).unwrap();
        assert_eq!(trim_nonspeech(&w, DEFAULT_GATE_DB), w);
    }

    #[test]
    fn silence_keeps_a_stub() {
        let t = trim_nonspeech(&Waveform::zeros(16000, 16000), DEFAULT_GATE_DB);
        assert_eq!(t.len(), 1600);
    }
}
