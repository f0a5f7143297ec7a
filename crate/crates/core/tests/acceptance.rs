//! End-to-end acceptance checks. Each test prints one `criterion N` line
//! with its verdict before asserting, so `cargo test --test acceptance`
//! gives a readable summary even when captured output is hidden.

use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use vocspoof_core::contrastive::{cf_loss_and_gradient, contrastive_feature_loss};
use vocspoof_core::dsp::{design_butterworth_bandstop, filtfilt};
use vocspoof_core::harness::run_experiment;
use vocspoof_core::metrics::compute_eer;
use vocspoof_core::model::{forward_backward, CfGroup, ModelParams, NetworkConfig};
use vocspoof_core::stats::{bonferroni, holm_bonferroni};
use vocspoof_core::{
    BatchComposition, CfConfig, CfLevels, ExperimentConfig, Label, PairingMode, Report, ScoreEntry, ScoreSet, Waveform,
};

fn verdict(n: usize, name: &str, ok: bool, detail: &str) {
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "criterion {n} ({name}): {} | {detail}", if ok { "PASS" } else { "FAIL" });
}

fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| rng.random_range(-1.0..1.0))
}

/// Relative error of every component, with components far below the
/// largest analytic one compared against a scale floor.
fn max_rel_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let scale = analytic.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let floor = 1e-3 * scale;
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(floor).max(1e-12))
        .fold(0.0, f64::max)
}

const FD_STEP: f64 = 1e-5;

/// Smallest |pre-activation| feeding a LeakyReLU anywhere in the network.
/// Central differences straddle the kink when this is below the step.
fn kink_margin(params: &ModelParams, inputs: &[Array2<f64>]) -> f64 {
    fn stack(layers: &[vocspoof_core::model::Affine], mut h: Array2<f64>, margin: &mut f64) -> Array2<f64> {
        for (i, l) in layers.iter().enumerate() {
            h = h.dot(&l.w) + &l.b;
            if i + 1 < layers.len() {
                *margin = h.iter().fold(*margin, |m, v| m.min(v.abs()));
                h.mapv_inplace(|v| if v > 0.0 { v } else { 0.01 * v });
            }
        }
        h
    }
    let mut margin = f64::INFINITY;
    for x in inputs {
        let f = stack(&params.extractor, x.clone(), &mut margin);
        stack(&params.head, mean_row(&f), &mut margin);
    }
    margin
}

fn fd_params(params: &ModelParams, loss: impl Fn(&ModelParams) -> f64) -> Vec<f64> {
    let flat = params.to_flat();
    (0..flat.len())
        .map(|k| {
            let mut up = flat.clone();
            let mut down = flat.clone();
            up[k] += FD_STEP;
            down[k] -= FD_STEP;
            (loss(&params.from_flat(&up)) - loss(&params.from_flat(&down))) / (2.0 * FD_STEP)
        })
        .collect()
}

#[test]
fn criterion_1_gradients_match_finite_differences() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut worst = [0.0f64; 4];
    let mut redrawn = 0;
    for _ in 0..20 {
        let n = rng.random_range(1..=5);
        let d = rng.random_range(2..=8);
        let net = NetworkConfig {
            input_dim: 3,
            hidden: 5,
            feature_dim: d,
            head_hidden: 4,
            head_layers: 3,
        };
        let (params, inputs) = loop {
            let params = ModelParams::init(&net, &mut rng);
            let inputs: Vec<Array2<f64>> = (0..6).map(|_| random_matrix(&mut rng, n, 3)).collect();
            if kink_margin(&params, &inputs) > 100.0 * FD_STEP {
                break (params, inputs);
            }
            redrawn += 1;
        };
        let refs: Vec<&Array2<f64>> = inputs.iter().collect();
        let labels: Vec<Label> = (0..6).map(|i| if i < 2 { Label::Bonafide } else { Label::Spoof }).collect();

        // CE alone, through the whole network.
        let (_, g) = forward_backward(&params, &refs, &labels, None, 0).unwrap();
        let num = fd_params(&params, |p| forward_backward(p, &refs, &labels, None, 0).unwrap().0.total());
        worst[0] = worst[0].max(max_rel_error(&g.to_flat(), &num));

        // CF alone, with respect to the features, at each level.
        let bona: Vec<Array2<f64>> = (0..2).map(|_| random_matrix(&mut rng, n, d)).collect();
        let spoof: Vec<Array2<f64>> = (0..4).map(|_| random_matrix(&mut rng, n, d)).collect();
        for (slot, levels) in [(1, CfLevels::Sequence), (2, CfLevels::Utterance)] {
            let cfg = CfConfig { tau: 0.07, levels };
            let batch = BatchComposition::new(bona.clone(), spoof.clone(), PairingMode::Paired).unwrap();
            let (_, grads) = cf_loss_and_gradient(&batch, &cfg).unwrap();
            let analytic: Vec<f64> = grads.iter().flat_map(|m| m.iter().copied()).collect();
            let mut numeric = Vec::with_capacity(analytic.len());
            for member in 0..6 {
                for idx in 0..n * d {
                    let (r, c) = (idx / d, idx % d);
                    let eval = |delta: f64| {
                        let mut b = bona.clone();
                        let mut s = spoof.clone();
                        let m = if member < 2 { &mut b[member] } else { &mut s[member - 2] };
                        m[[r, c]] += delta;
                        contrastive_feature_loss(&BatchComposition::new(b, s, PairingMode::Paired).unwrap(), &cfg).unwrap()
                    };
                    numeric.push((eval(FD_STEP) - eval(-FD_STEP)) / (2.0 * FD_STEP));
                }
            }
            worst[slot] = worst[slot].max(max_rel_error(&analytic, &numeric));
        }

        // CE + CF at both levels, through the whole network.
        let group = CfGroup {
            bona: vec![0, 1],
            spoof: vec![2, 3, 4, 5],
            pairing: PairingMode::Paired,
            cfg: CfConfig::default(),
        };
        let (_, g) = forward_backward(&params, &refs, &labels, Some(&group), 0).unwrap();
        let num = fd_params(&params, |p| forward_backward(p, &refs, &labels, Some(&group), 0).unwrap().0.total());
        worst[3] = worst[3].max(max_rel_error(&g.to_flat(), &num));
    }
    let elapsed = start.elapsed();
    let ok = worst.iter().all(|&e| e < 1e-4) && elapsed < Duration::from_secs(30);
    verdict(
        1,
        "gradient correctness",
        ok,
        &format!(
            "max rel err CE {:.2e}, CF seq {:.2e}, CF utt {:.2e}, CE+CF {:.2e}; {} draws too close to a kink redrawn; {:.1} s",
            worst[0],
            worst[1],
            worst[2],
            worst[3],
            redrawn,
            elapsed.as_secs_f64()
        ),
    );
    assert!(ok);
}

fn cosine_mean(a: &Array2<f64>, b: &Array2<f64>, tau: f64) -> f64 {
    let n = a.nrows();
    let mut s = 0.0;
    for t in 0..n {
        let (x, y) = (a.row(t), b.row(t));
        s += x.dot(&y) / (x.dot(&x).sqrt() * y.dot(&y).sqrt() * tau);
    }
    s / n as f64
}

fn mean_row(a: &Array2<f64>) -> Array2<f64> {
    a.mean_axis(ndarray::Axis(0)).unwrap().insert_axis(ndarray::Axis(0))
}

/// Direct transcription of the two-class contrastive loss: every member is
/// an anchor, its positives are the other members of its class, and the
/// denominator sums over every other member of the batch.
fn brute_force_cf(bona: &[Array2<f64>], spoof: &[Array2<f64>], tau: f64) -> f64 {
    let all: Vec<(&Array2<f64>, bool)> = bona.iter().map(|m| (m, true)).chain(spoof.iter().map(|m| (m, false))).collect();
    let mut loss = 0.0;
    for (a, (za, ca)) in all.iter().enumerate() {
        let h: f64 = all
            .iter()
            .enumerate()
            .filter(|(b, _)| *b != a)
            .map(|(_, (zb, _))| cosine_mean(za, zb, tau).exp())
            .sum();
        let positives: Vec<&Array2<f64>> = all
            .iter()
            .enumerate()
            .filter(|(b, (_, cb))| *b != a && cb == ca)
            .map(|(_, (zb, _))| *zb)
            .collect();
        let class_term: f64 = positives.iter().map(|zp| (cosine_mean(za, zp, tau).exp() / h).ln()).sum();
        loss -= class_term / positives.len() as f64;
    }
    loss
}

#[test]
fn criterion_2_contrastive_loss_matches_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let ni = rng.random_range(2..=3);
        let nj = rng.random_range(2..=8);
        let n = rng.random_range(1..=6);
        let d = rng.random_range(2..=8);
        let bona: Vec<Array2<f64>> = (0..ni).map(|_| random_matrix(&mut rng, n, d)).collect();
        let spoof: Vec<Array2<f64>> = (0..nj).map(|_| random_matrix(&mut rng, n, d)).collect();
        let batch = BatchComposition::new(bona.clone(), spoof.clone(), PairingMode::Random).unwrap();
        let pooled_b: Vec<Array2<f64>> = bona.iter().map(mean_row).collect();
        let pooled_s: Vec<Array2<f64>> = spoof.iter().map(mean_row).collect();
        for (levels, expect) in [
            (CfLevels::Sequence, brute_force_cf(&bona, &spoof, 0.07)),
            (CfLevels::Utterance, brute_force_cf(&pooled_b, &pooled_s, 0.07)),
        ] {
            let got = contrastive_feature_loss(&batch, &CfConfig { tau: 0.07, levels }).unwrap();
            worst = worst.max((got - expect).abs() / expect.abs().max(1e-300));
        }
    }

    let same = Array2::from_shape_fn((4, 3), |(r, c)| 1.0 + r as f64 + 0.5 * c as f64);
    let sym = BatchComposition::new(vec![same.clone(); 2], vec![same; 2], PairingMode::Paired).unwrap();
    let target = 4.0 * 3f64.ln();
    let seq = contrastive_feature_loss(&sym, &CfConfig { tau: 0.07, levels: CfLevels::Sequence }).unwrap();
    let utt = contrastive_feature_loss(&sym, &CfConfig { tau: 0.07, levels: CfLevels::Utterance }).unwrap();
    let sym_err = ((seq - target).abs()).max((utt - target).abs()) / target;

    let ok = worst < 1e-9 && sym_err < 1e-9;
    verdict(
        2,
        "contrastive loss oracle",
        ok,
        &format!("max rel err {worst:.2e} on 100 batches; symmetric batch {seq:.10} vs 4 ln 3 = {target:.10}"),
    );
    assert!(ok);
}

fn score_set(bona: &[f64], spoof: &[f64]) -> ScoreSet {
    let entry = |i: usize, score: f64, label: Label| ScoreEntry {
        trial_id: format!("T{i}"),
        score,
        label,
        attack_tag: if label == Label::Bonafide { "-".into() } else { "x".into() },
        set_name: "s".into(),
    };
    let entries = bona
        .iter()
        .map(|&s| (s, Label::Bonafide))
        .chain(spoof.iter().map(|&s| (s, Label::Spoof)))
        .enumerate()
        .map(|(i, (s, l))| entry(i, s, l))
        .collect();
    ScoreSet::new(entries).unwrap()
}

/// Counts error rates at every unique score and at +inf from scratch, then
/// interpolates at the first threshold where FRR - FAR is non-negative.
fn brute_force_eer(bona: &[f64], spoof: &[f64]) -> f64 {
    let mut thresholds: Vec<f64> = bona.iter().chain(spoof).copied().collect();
    thresholds.sort_by(f64::total_cmp);
    thresholds.dedup();
    thresholds.push(f64::INFINITY);
    let rates = |t: f64| {
        let frr = bona.iter().filter(|&&s| s < t).count() as f64 / bona.len() as f64;
        let far = spoof.iter().filter(|&&s| s >= t).count() as f64 / spoof.len() as f64;
        (frr, far)
    };
    let mut prev = rates(thresholds[0]);
    for &t in &thresholds {
        let (frr, far) = rates(t);
        let d = frr - far;
        if d == 0.0 {
            return frr;
        }
        if d > 0.0 {
            let pd = prev.0 - prev.1;
            let lambda = -pd / (d - pd);
            return prev.0 + lambda * (frr - prev.0);
        }
        prev = (frr, far);
    }
    unreachable!()
}

#[test]
fn criterion_3_eer_matches_exhaustive_enumeration() {
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let mut mismatches = 0;
    for case in 0..500 {
        let nb = rng.random_range(1..=300);
        let ns = rng.random_range(1..=700);
        // Coarse grids in some cases force ties across classes.
        let grid = if case % 3 == 0 { 8.0 } else { 1e6 };
        let mut draw = |shift: f64| ((rng.random_range(0.0..1.0) + shift) * grid).round() / grid;
        let bona: Vec<f64> = (0..nb).map(|_| draw(0.3)).collect();
        let spoof: Vec<f64> = (0..ns).map(|_| draw(0.0)).collect();
        let got = compute_eer(&score_set(&bona, &spoof)).unwrap().eer;
        if got != brute_force_eer(&bona, &spoof) {
            mismatches += 1;
        }
    }
    let separated = compute_eer(&score_set(&[3.0, 4.0, 5.0], &[0.0, 1.0, 2.0])).unwrap().eer;
    let identical = compute_eer(&score_set(&[1.0, 2.0, 3.0, 4.0], &[1.0, 2.0, 3.0, 4.0])).unwrap().eer;
    let ok = mismatches == 0 && separated == 0.0 && identical == 0.5;
    verdict(
        3,
        "EER oracle",
        ok,
        &format!("{mismatches} mismatches in 500 sets; separated {separated}, identical {identical}"),
    );
    assert!(ok);
}

fn sine(freq: f64, sr: f64, n: usize) -> Waveform {
    Waveform::new((0..n).map(|i| (2.0 * std::f64::consts::PI * freq * i as f64 / sr).sin()).collect(), sr as u32).unwrap()
}

fn middle_rms(x: &[f64]) -> f64 {
    let m = &x[x.len() / 4..3 * x.len() / 4];
    (m.iter().map(|v| v * v).sum::<f64>() / m.len() as f64).sqrt()
}

#[test]
fn criterion_4_bandstop_filter_fidelity() {
    let sr = 16000.0;
    let (lo, hi) = (1000.0, 2000.0);
    let filter = design_butterworth_bandstop(10, lo, hi, sr).unwrap();
    let n = 32000;
    let gain_db = |f: f64| {
        let x = sine(f, sr, n);
        let y = filtfilt(&filter, &x).unwrap();
        20.0 * (middle_rms(y.samples()) / middle_rms(x.samples())).log10()
    };
    let stop = gain_db((lo * hi).sqrt());
    let pass = gain_db(6000.0);

    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let x = Waveform::new((0..4000).map(|_| rng.random_range(-1.0..1.0)).collect(), 16000).unwrap();
    let forward = filtfilt(&filter, &x).unwrap();
    let backward = filtfilt(&filter, &x.reversed()).unwrap().reversed();
    let sym = forward.samples().iter().zip(backward.samples()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);

    let ok = stop <= -40.0 && pass.abs() < 1.0 && sym < 1e-9;
    verdict(
        4,
        "filter fidelity",
        ok,
        &format!("stopband centre {stop:.1} dB, passband {pass:.3} dB, zero-phase asymmetry {sym:.1e}"),
    );
    assert!(ok);
}

struct DeskRun {
    report: Report,
    elapsed: Duration,
    n_seeds: usize,
}

fn desk_run() -> &'static DeskRun {
    static RUN: OnceLock<DeskRun> = OnceLock::new();
    RUN.get_or_init(|| {
        let cfg = ExperimentConfig::default();
        let out = Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance-desk");
        let _ = std::fs::remove_dir_all(&out);
        let start = Instant::now();
        let report = run_experiment(&cfg, &out).expect("desk experiment runs");
        DeskRun {
            report,
            elapsed: start.elapsed(),
            n_seeds: cfg.train.seeds.len(),
        }
    })
}

#[test]
fn criterion_5_desk_run_reaches_low_eer() {
    let run = desk_run();
    let cfg = &run.report.config;
    let system = cfg.systems.iter().find(|s| s.name == "ce_cf_paired").expect("paired CE+CF system");
    let eer = run.report.mean_eer(&system.name, "eval").expect("eval EER");
    let per_seed = run.elapsed / run.n_seeds as u32;
    let setup_ok = cfg.corpus.n_trials == 200
        && cfg.synthesis.channels.len() == 4
        && system.aug_views == 1
        && system.pairing == PairingMode::Paired
        && run.n_seeds == 3;
    let ok = setup_ok && eer <= 0.05 && per_seed < Duration::from_secs(600);
    verdict(
        5,
        "end-to-end desk run",
        ok,
        &format!(
            "CE+CF paired mean eval EER {:.4} (target <= 0.05); whole run {:.0} s, {:.0} s per seed",
            eer,
            run.elapsed.as_secs_f64(),
            per_seed.as_secs_f64()
        ),
    );
    assert!(ok);
}

#[test]
fn criterion_6_paired_contrastive_not_worse_than_ce() {
    let r = &desk_run().report;
    let cf = r.mean_eer("ce_cf_paired", "eval").unwrap();
    let ce = r.mean_eer("ce_aug", "eval").unwrap();
    let ok = cf <= ce;
    verdict(
        6,
        "pairing/loss trend",
        ok,
        &format!("CE+CF paired {cf:.4} vs CE with augmentation {ce:.4} (mean eval EER over 3 seeds)"),
    );
    assert!(ok);
}

#[test]
fn criterion_7_roundtrip_training_not_better_than_matched() {
    let r = &desk_run().report;
    let roundtrip = r.mean_eer("ce_roundtrip", "eval").unwrap();
    let matched = r.mean_eer("ce_matched", "eval").unwrap();
    let ok = roundtrip >= matched;
    verdict(
        7,
        "re-sampling trend",
        ok,
        &format!("trained on roundtrip {roundtrip:.4} vs matched rate {matched:.4} (mean eval EER over 3 seeds)"),
    );
    assert!(ok);
}

#[test]
fn criterion_8_holm_bonferroni_matches_manual_procedure() {
    let mut rng = ChaCha8Rng::seed_from_u64(808);
    let alpha = 0.05;
    let (mut mismatches, mut not_superset) = (0, 0);
    for case in 0..100 {
        let m = rng.random_range(1..=21);
        let p: Vec<f64> = (0..m)
            .map(|_| {
                let v: f64 = rng.random_range(0.0..1.0);
                // Skew towards small values so rejections actually happen, and
                // repeat a value now and then to exercise ties.
                if case % 4 == 0 { (v * 20.0).round() / 400.0 } else { v.powi(4) }
            })
            .collect();
        let mut order: Vec<usize> = (0..m).collect();
        order.sort_by(|&a, &b| p[a].partial_cmp(&p[b]).unwrap());
        let mut manual = vec![false; m];
        for (k, &i) in order.iter().enumerate() {
            if p[i] > alpha / (m - k) as f64 {
                break;
            }
            manual[i] = true;
        }
        let holm = holm_bonferroni(&p, alpha);
        if holm != manual {
            mismatches += 1;
        }
        if bonferroni(&p, alpha).iter().zip(&holm).any(|(&b, &h)| b && !h) {
            not_superset += 1;
        }
    }
    let ok = mismatches == 0 && not_superset == 0;
    verdict(
        8,
        "Holm-Bonferroni",
        ok,
        &format!("{mismatches} mismatches with the manual step-down; {not_superset} inputs where Bonferroni rejects more"),
    );
    assert!(ok);
}

fn files_under(dir: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push(p.strip_prefix(dir).unwrap().to_path_buf());
            }
        }
    }
    out.sort();
    out
}

#[test]
fn criterion_9_reruns_are_byte_identical() {
    let cfg: ExperimentConfig = r#"
        seed = 99
        [corpus]
        n_trials = 20
        [synthesis]
        channels = ["gl-mel20", "lpc16"]
        [train]
        max_epochs = 3
        seeds = [1, 2]
        spoofs_per_batch = 2
        [[systems]]
        name = "ce_aug"
        loss_mode = "ce"
        aug_views = 1
        [[systems]]
        name = "ce_cf_paired"
        loss_mode = "ce+cf"
        aug_views = 1
        [[systems]]
        name = "ce_roundtrip"
        loss_mode = "ce"
        data = "roundtrip"
    "#
    .parse()
    .unwrap();
    let root = tempfile::tempdir().unwrap();
    let out = root.path().join("run");
    let snapshot = || -> Vec<(PathBuf, Vec<u8>)> {
        files_under(&out).into_iter().map(|p| (p.clone(), std::fs::read(out.join(&p)).unwrap())).collect()
    };
    run_experiment(&cfg, &out).unwrap();
    let first = snapshot();
    std::fs::remove_dir_all(&out).unwrap();
    run_experiment(&cfg, &out).unwrap();
    let second = snapshot();

    let same_listing = first.iter().map(|(p, _)| p).eq(second.iter().map(|(p, _)| p));
    let differing: Vec<String> = first
        .iter()
        .zip(&second)
        .filter(|((_, x), (_, y))| x != y)
        .map(|((p, _), _)| p.display().to_string())
        .collect();
    let count = |ext: &str| first.iter().filter(|(p, _)| p.extension().is_some_and(|e| e == ext)).count();
    let n_checkpoints = first.iter().filter(|(p, _)| p.ends_with("checkpoint.json")).count();
    let ok = same_listing && differing.is_empty() && n_checkpoints == 6 && count("csv") > 0;
    verdict(
        9,
        "determinism",
        ok,
        &format!(
            "{} files compared ({} CSV, {} checkpoints), {} differ {:?}",
            first.len(),
            count("csv"),
            n_checkpoints,
            differing.len(),
            differing
        ),
    );
    assert!(ok);
}
