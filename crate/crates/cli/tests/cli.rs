use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use vocspoof_core::manifest::NO_ATTACK;
use vocspoof_core::{Label, Subset, TrialManifest, TrialRecord};

fn vocspoof(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vocspoof"))
        .args(args)
        .env_remove("VOCSPOOF_OUT_ROOT")
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn small_config(dir: &Path, extra: &str) -> PathBuf {
    let path = dir.join("small.toml");
    let text = format!(
        "seed = 11\n[corpus]\nn_trials = 20\n[synthesis]\nchannels = [\"lpc16\", \"gl-mel20\"]\n\
         [train]\nmax_epochs = 2\nseeds = [1]\nspoofs_per_batch = 2\n{extra}\n\
         [[systems]]\nname = \"ce\"\nloss_mode = \"ce\"\n"
    );
    std::fs::write(&path, text).unwrap();
    path
}

/// Four bona fide trials and eight spoofs from two attacks, no audio.
fn score_manifest(dir: &Path) -> PathBuf {
    let mut records = Vec::new();
    for i in 0..4 {
        records.push(TrialRecord::bonafide(format!("B{i}"), format!("B{i}.wav"), Subset::Eval));
        for tag in ["a1", "a2"] {
            records.push(TrialRecord {
                trial_id: format!("B{i}-{tag}"),
                path: format!("B{i}-{tag}.wav").into(),
                label: Label::Spoof,
                attack_tag: tag.into(),
                source_id: format!("B{i}"),
                subset: Subset::Eval,
            });
        }
    }
    let path = dir.join("manifest.tsv");
    TrialManifest::new(records, dir).unwrap().save(&path).unwrap();
    path
}

fn write_scores(dir: &Path, name: &str, bona: [f64; 4], a1: [f64; 4], a2: [f64; 4]) -> PathBuf {
    let mut text = String::new();
    for i in 0..4 {
        text += &format!("B{i}\t{}\nB{i}-a1\t{}\nB{i}-a2\t{}\n", bona[i], a1[i], a2[i]);
    }
    let path = dir.join(format!("{name}.txt"));
    std::fs::write(&path, text).unwrap();
    path
}

fn read_csv(path: &Path) -> Vec<Vec<String>> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| l.split(',').map(str::to_string).collect())
        .collect()
}

#[test]
fn help_and_usage_errors() {
    assert_eq!(code(&vocspoof(&["--help"])), 0);
    assert_eq!(code(&vocspoof(&["--version"])), 0);
    assert_eq!(code(&vocspoof(&["no-such-command"])), 1);
    assert_eq!(code(&vocspoof(&["eer"])), 1);
}

#[test]
fn bad_config_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "[corpus]\nn_trials = 5\n").unwrap();
    let o = vocspoof(&["--config", s(&cfg), "--out", s(dir.path()), "gen-corpus"]);
    assert_eq!(code(&o), 1, "{}", String::from_utf8_lossy(&o.stderr));

    std::fs::write(&cfg, "no_such_key = 1\n").unwrap();
    assert_eq!(code(&vocspoof(&["--config", s(&cfg), "--out", s(dir.path()), "gen-corpus"])), 1);
}

#[test]
fn missing_input_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("absent.tsv");
    let o = vocspoof(&["--out", s(dir.path()), "synth", "--manifest", s(&missing)]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("absent.tsv"));
}

#[test]
fn gen_corpus_is_reproducible_and_honours_out_root() {
    let dir = tempfile::tempdir().unwrap();
    let run = |sub: &str| {
        let o = Command::new(env!("CARGO_BIN_EXE_vocspoof"))
            .args(["--seed", "5", "--out", sub, "gen-corpus", "--n-trials", "20"])
            .env("VOCSPOOF_OUT_ROOT", dir.path())
            .output()
            .unwrap();
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        dir.path().join(sub)
    };
    let a = run("a");
    let b = run("b");
    let m = TrialManifest::load(a.join("manifest.tsv")).unwrap();
    assert_eq!(m.records.len(), 20);
    assert!(m.records.iter().all(|r| r.label == Label::Bonafide && r.attack_tag == NO_ATTACK));
    for r in &m.records {
        assert_eq!(
            std::fs::read(a.join(&r.path)).unwrap(),
            std::fs::read(b.join(&r.path)).unwrap(),
            "{}",
            r.trial_id
        );
    }
}

#[test]
fn eer_group_report_and_sigtest() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = score_manifest(dir.path());
    let clean = write_scores(dir.path(), "clean", [4.0, 5.0, 6.0, 7.0], [0.0, 1.0, 2.0, 3.0], [-1.0, -2.0, -3.0, -4.0]);
    let overlap = write_scores(dir.path(), "overlap", [4.0, 5.0, 6.0, 7.0], [0.0, 1.0, 2.0, 3.0], [4.5, 5.5, 6.5, 7.5]);
    let out = dir.path().join("out");

    let o = vocspoof(&["--out", s(&out), "eer", "--scores", s(&clean), "--scores", s(&overlap), "--manifest", s(&manifest)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let rows = read_csv(&out.join("eer.csv"));
    assert_eq!(rows[0], ["set", "eer", "threshold", "n_bonafide", "n_spoof"]);
    assert_eq!(rows[1][0], "clean");
    assert_eq!(rows[1][1].parse::<f64>().unwrap(), 0.0);
    assert_eq!(rows[2][0], "overlap");
    assert!(rows[2][1].parse::<f64>().unwrap() > 0.3);
    assert_eq!(rows[3][0], "pooled");
    assert_eq!(rows[3][3], "8");

    let o = vocspoof(&["--out", s(&out), "group-report", "--scores", s(&overlap), "--manifest", s(&manifest)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let groups = std::fs::read_to_string(out.join("groups.csv")).unwrap();
    assert!(groups.contains("a1") && groups.contains("a2"));
    assert!(out.join("histograms.csv").exists());

    let grouping = dir.path().join("grouping.tsv");
    std::fs::write(&grouping, "a1\tall\na2\tall\n").unwrap();
    let o = vocspoof(&[
        "--out",
        s(&out),
        "group-report",
        "--scores",
        s(&overlap),
        "--manifest",
        s(&manifest),
        "--grouping",
        s(&grouping),
    ]);
    assert_eq!(code(&o), 0);
    let groups = std::fs::read_to_string(out.join("groups.csv")).unwrap();
    assert!(groups.contains("all") && !groups.contains("a1"));

    let clean_arg = format!("clean={}", s(&clean));
    let overlap_arg = format!("overlap={}", s(&overlap));
    let o = vocspoof(&["--out", s(&out), "sigtest", "--scores", &clean_arg, "--scores", &overlap_arg, "--manifest", s(&manifest)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let p = read_csv(&out.join("significance_p.csv"));
    assert_eq!(p.len(), 3);
    assert!(out.join("significance_reject.csv").exists());

    let o = vocspoof(&["--out", s(&out), "sigtest", "--scores", "no-equals-sign", "--manifest", s(&manifest)]);
    assert_eq!(code(&o), 1);
}

#[test]
fn scores_for_unknown_trials_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = score_manifest(dir.path());
    let bad = dir.path().join("bad.txt");
    std::fs::write(&bad, "X9\t0.5\n").unwrap();
    let o = vocspoof(&["--out", s(dir.path()), "eer", "--scores", s(&bad), "--manifest", s(&manifest)]);
    assert_eq!(code(&o), 2);
}

#[test]
fn corpus_to_eer_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), "");
    let c = s(&cfg);
    let step = |args: &[&str]| {
        let mut full = vec!["--config", c];
        full.extend_from_slice(args);
        let o = vocspoof(&full);
        assert_eq!(code(&o), 0, "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
    };
    let corpus = dir.path().join("corpus");
    let vocoded = dir.path().join("vocoded");
    let model = dir.path().join("model");
    let scored = dir.path().join("scored");
    step(&["--out", s(&corpus), "gen-corpus"]);
    step(&["--out", s(&vocoded), "synth", "--manifest", s(&corpus.join("manifest.tsv"))]);
    let m = TrialManifest::load(vocoded.join("manifest.tsv")).unwrap();
    assert_eq!(m.records.len(), 60);

    step(&["--out", s(&model), "train", "--manifest", s(&vocoded.join("manifest.tsv")), "--system", "ce"]);
    let ckpt = model.join("seed-1").join("checkpoint.json");
    assert!(ckpt.exists());
    assert_eq!(std::fs::read_to_string(model.join("seed-1").join("history.csv")).unwrap().lines().count(), 3);

    step(&[
        "--out",
        s(&scored),
        "score",
        "--checkpoint",
        s(&ckpt),
        "--manifest",
        s(&vocoded.join("manifest.tsv")),
        "--subset",
        "eval",
        "--trim",
    ]);
    let plain = scored.join("scores_eval.txt");
    let trimmed = scored.join("scores_eval_trim.txt");
    assert_eq!(std::fs::read_to_string(&plain).unwrap().lines().count(), 12);
    assert_eq!(std::fs::read_to_string(&trimmed).unwrap().lines().count(), 12);

    step(&["--out", s(&scored), "eer", "--scores", s(&plain), "--scores", s(&trimmed), "--manifest", s(&vocoded.join("manifest.tsv"))]);
    let rows = read_csv(&scored.join("eer.csv"));
    assert_eq!(rows.len(), 4);
    for r in &rows[1..] {
        let e: f64 = r[1].parse().unwrap();
        assert!((0.0..=1.0).contains(&e));
    }
}

#[test]
fn divergent_training_is_a_numerical_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), "lr0 = 1e250");
    let corpus = dir.path().join("corpus");
    let vocoded = dir.path().join("vocoded");
    assert_eq!(code(&vocspoof(&["--config", s(&cfg), "--out", s(&corpus), "gen-corpus"])), 0);
    let o = vocspoof(&["--config", s(&cfg), "--out", s(&vocoded), "synth", "--manifest", s(&corpus.join("manifest.tsv")), "--channels", "lpc16"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let o = vocspoof(&[
        "--config",
        s(&cfg),
        "--out",
        s(&dir.path().join("model")),
        "train",
        "--manifest",
        s(&vocoded.join("manifest.tsv")),
    ]);
    assert_eq!(code(&o), 3, "{}", String::from_utf8_lossy(&o.stderr));
}
