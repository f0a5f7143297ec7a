//! Synthetic pseudo-speech corpus: a wandering F0 contour drives a pulse
//! train through three time-varying resonators, with breath noise mixed into
//! the excitation and short low-level noise at both ends.

use std::f64::consts::PI;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::dsp::wav::write_wav;
use crate::dsp::Waveform;
use crate::error::{Error, Result};
use crate::manifest::{Subset, TrialManifest, TrialRecord};
use crate::seed::rng_for;

pub const CORPUS_RATE: u32 = 16000;
pub const MIN_TRIALS: usize = 20;
pub const F0_RANGE: (f64, f64) = (80.0, 300.0);

#[derive(Debug, Clone, Copy)]
struct Segment {
    start: f64,
    formants: [f64; 3],
    amp: f64,
}

fn resonator(x: &mut [f64], freq: &[f64], bw: f64, sr: f64) {
    let r = (-PI * bw / sr).exp();
    let (mut y1, mut y2) = (0.0, 0.0);
    for (v, f) in x.iter_mut().zip(freq) {
        let a1 = 2.0 * r * (2.0 * PI * f / sr).cos();
        // Unit gain near the resonance keeps the three stages balanced.
        let y = (1.0 - r) * *v + a1 * y1 - r * r * y2;
        y2 = y1;
        y1 = y;
        *v = y;
    }
}

/// One pseudo-speech utterance of 1 to 4 seconds.
pub fn synth_utterance<R: Rng>(rng: &mut R) -> Waveform {
    let sr = CORPUS_RATE as f64;
    let total = rng.random_range(1.0..4.0);
    let lead = rng.random_range(0.05..0.25);
    let tail = rng.random_range(0.05..0.25);
    let n_total = (total * sr) as usize;
    let n_lead = (lead * sr) as usize;
    let n_tail = (tail * sr) as usize;
    let n = n_total - n_lead - n_tail;

    let base = rng.random_range(100.0..260.0);
    let vib_rate = rng.random_range(0.5..3.0);
    let vib_depth = rng.random_range(0.03..0.15);
    let vib_phase = rng.random_range(0.0..2.0 * PI);
    let declination = rng.random_range(-0.15..0.05);

    let mut segments = Vec::new();
    let mut t = 0.0;
    let dur = n as f64 / sr;
    while t < dur {
        segments.push(Segment {
            start: t,
            formants: [
                rng.random_range(300.0..900.0),
                rng.random_range(900.0..2400.0),
                rng.random_range(2400.0..3600.0),
            ],
            amp: rng.random_range(0.4..1.0),
        });
        t += rng.random_range(0.15..0.4);
    }
    segments.push(Segment { start: dur, ..*segments.last().expect("one segment") });
    let bws = [rng.random_range(60.0..120.0), rng.random_range(80.0..160.0), rng.random_range(120.0..220.0)];
    let breath = rng.random_range(0.02..0.08);
    let jitter = rng.random_range(0.002..0.01);

    let mut excitation = vec![0.0; n];
    let mut tracks = [vec![0.0; n], vec![0.0; n], vec![0.0; n]];
    let mut envelope = vec![0.0; n];
    let mut phase = 0.0;
    let mut seg = 0;
    let mut period_scale = 1.0;
    for i in 0..n {
        let t = i as f64 / sr;
        while seg + 2 < segments.len() && t >= segments[seg + 1].start {
            seg += 1;
        }
        let (a, b) = (segments[seg], segments[seg + 1]);
        // Raised-cosine glide between segment targets.
        let u = ((t - a.start) / (b.start - a.start)).clamp(0.0, 1.0);
        let w = 0.5 - 0.5 * (PI * u).cos();
        for (k, track) in tracks.iter_mut().enumerate() {
            track[i] = a.formants[k] + w * (b.formants[k] - a.formants[k]);
        }
        envelope[i] = a.amp + w * (b.amp - a.amp);

        let f0 = (base * (1.0 + vib_depth * (2.0 * PI * vib_rate * t + vib_phase).sin()) * (1.0 + declination * t / dur))
            .clamp(F0_RANGE.0, F0_RANGE.1);
        phase += f0 / sr * period_scale;
        if phase >= 1.0 {
            phase -= 1.0;
            excitation[i] += 1.0;
            period_scale = 1.0 + jitter * rng.random_range(-1.0..1.0);
        }
        let noise: f64 = StandardNormal.sample(rng);
        excitation[i] += breath * noise;
    }
    for k in 0..3 {
        resonator(&mut excitation, &tracks[k], bws[k], sr);
    }
    for (v, e) in excitation.iter_mut().zip(&envelope) {
        *v *= e;
    }
    // 10 ms fades at the voiced edges.
    let fade = (0.01 * sr) as usize;
    for i in 0..fade.min(n / 2) {
        let g = i as f64 / fade as f64;
        excitation[i] *= g;
        excitation[n - 1 - i] *= g;
    }
    let peak = excitation.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-12);
    let gain = rng.random_range(0.3..0.8) / peak;
    let floor = 1e-3 * rng.random_range(0.3..0.8);

    let mut out = Vec::with_capacity(n_total);
    for i in 0..n_total {
        let noise: f64 = StandardNormal.sample(rng);
        let body = if i >= n_lead && i < n_lead + n { gain * excitation[i - n_lead] } else { 0.0 };
        out.push(body + floor * noise);
    }
    Waveform::new(out, CORPUS_RATE).expect("finite samples")
}

pub fn trial_id(index: usize) -> String {
    format!("D{index:04}")
}

/// Subset of trial `index` out of `n`: the first 60% train, then 20% dev,
/// then eval.
pub fn split_of(index: usize, n: usize) -> Subset {
    let n_train = (n as f64 * 0.6).round() as usize;
    let n_dev = (n as f64 * 0.2).round() as usize;
    if index < n_train {
        Subset::Train
    } else if index < n_train + n_dev {
        Subset::Dev
    } else {
        Subset::Eval
    }
}

/// Writes `n_trials` utterances to `out_dir/wav` and the manifest to
/// `out_dir/manifest.tsv`.
pub fn gen_desk_corpus(n_trials: usize, seed: u64, out_dir: &Path) -> Result<TrialManifest> {
    if n_trials < MIN_TRIALS {
        return Err(Error::Config(format!("a desk corpus needs at least {MIN_TRIALS} trials, got {n_trials}")));
    }
    let wav_dir = out_dir.join("wav");
    std::fs::create_dir_all(&wav_dir).map_err(|e| Error::io(&wav_dir, e))?;
    let records = (0..n_trials)
        .into_par_iter()
        .map(|i| {
            let id = trial_id(i);
            let w = synth_utterance(&mut rng_for(seed, &["corpus", &id]));
            let rel = Path::new("wav").join(format!("{id}.wav"));
            write_wav(out_dir.join(&rel), &w)?;
            Ok(TrialRecord::bonafide(id, rel, split_of(i, n_trials)))
        })
        .collect::<Result<Vec<_>>>()?;
    let manifest = TrialManifest::new(records, out_dir)?;
    manifest.save(out_dir.join("manifest.tsv"))?;
    Ok(manifest)
}
