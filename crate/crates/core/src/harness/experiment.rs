//! Full experiment: corpus, copy-synthesis, training per system and seed,
//! scoring, EER aggregation and significance testing.
//!
//! Output layout under the run directory:
//!
//! ```text
//! corpus/manifest.tsv, corpus/wav/
//! vocoded/manifest.tsv, vocoded/vocoded/
//! vocoded_roundtrip/...
//! runs/<system>/seed-<s>/{checkpoint.json, history.csv, scores_<set>.txt, groups_<set>.csv}
//! report/{config.toml, report.json, runs.csv, means.csv, significance_<set>_{p,reject}.csv}
//! ```

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::info;
use serde::Serialize;

use super::config::{ExperimentConfig, SpoofSource};
use super::corpus::gen_desk_corpus;
use super::trim::trim_nonspeech;
use crate::copy_synth::{build_vocoded_set, PairedTrialSet};
use crate::dsp::wav::read_wav;
use crate::error::{Error, Result};
use crate::manifest::{Subset, TrialManifest, TrialRecord};
use crate::metrics::{compute_eer, group_analysis, group_report_csv, identity_grouping, pooled_eer, write_scores, EerResult, ScoreSet};
use crate::model::{history_csv, load_examples, score_set, train, Checkpoint, Frontend, FrontendConfig, TrainingData};
use crate::stats::{significance_matrix, SignificanceMatrix};

pub const EVAL_SET: &str = "eval";
pub const EVAL_TRIM_SET: &str = "eval_trim";
pub const POOLED_SET: &str = "pooled";

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunResult {
    pub system: String,
    pub seed: u64,
    pub set: String,
    pub eer: EerResult,
    pub best_epoch: usize,
    pub epochs: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MeanRow {
    pub system: String,
    pub set: String,
    pub mean_eer: f64,
    pub n_seeds: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Report {
    pub config: ExperimentConfig,
    pub config_hash: String,
    /// Manifest name -> content hash.
    pub manifests: BTreeMap<String, String>,
    pub runs: Vec<RunResult>,
    pub means: Vec<MeanRow>,
    /// Set name -> pairwise tests across systems.
    pub significance: BTreeMap<String, SignificanceMatrix>,
    /// Stage -> trial ids that could not be used.
    pub missing: BTreeMap<String, Vec<String>>,
}

impl Report {
    pub fn mean_eer(&self, system: &str, set: &str) -> Option<f64> {
        self.means.iter().find(|m| m.system == system && m.set == set).map(|m| m.mean_eer)
    }

    pub fn runs_csv(&self) -> String {
        let mut out = String::from("system,seed,set,eer,threshold,n_bonafide,n_spoof,best_epoch,epochs\n");
        for r in &self.runs {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{},{}",
                r.system, r.seed, r.set, r.eer.eer, r.eer.threshold, r.eer.n_tar, r.eer.n_non, r.best_epoch, r.epochs
            );
        }
        out
    }

    pub fn means_csv(&self) -> String {
        let mut out = String::from("system,set,mean_eer,n_seeds\n");
        for m in &self.means {
            let _ = writeln!(out, "{},{},{},{}", m.system, m.set, m.mean_eer, m.n_seeds);
        }
        out
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        create_dir(dir)?;
        write_text(&dir.join("config.toml"), &self.config.to_toml()?)?;
        let json = serde_json::to_string_pretty(self).map_err(|e| Error::Data(e.to_string()))?;
        write_text(&dir.join("report.json"), &json)?;
        write_text(&dir.join("runs.csv"), &self.runs_csv())?;
        write_text(&dir.join("means.csv"), &self.means_csv())?;
        for (set, m) in &self.significance {
            write_text(&dir.join(format!("significance_{set}_p.csv")), &m.p_values_csv())?;
            write_text(&dir.join(format!("significance_{set}_reject.csv")), &m.reject_csv())?;
        }
        Ok(())
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

pub(crate) fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Records of `m` satisfying `keep`, with paths made independent of `m.root`.
pub fn select(m: &TrialManifest, keep: impl Fn(&TrialRecord) -> bool) -> Result<TrialManifest> {
    let records = m
        .records
        .iter()
        .filter(|r| keep(r))
        .map(|r| TrialRecord {
            path: m.resolve(r),
            ..r.clone()
        })
        .collect();
    TrialManifest::new(records, m.root.clone())
}

fn timed<T>(stage: &str, f: impl FnOnce() -> Result<T>) -> Result<T> {
    let t = Instant::now();
    let out = f().map_err(|e| e.in_stage(stage))?;
    info!("{stage}: {:.1} s", t.elapsed().as_secs_f64());
    Ok(out)
}

/// Scores `eval` with `ckpt` on the plain and (optionally) trimmed sets.
pub fn score_eval_sets(
    eval: &TrialManifest,
    ckpt: &Checkpoint,
    trimmed: bool,
    gate_db: f64,
) -> Result<(Vec<ScoreSet>, Vec<String>)> {
    let (plain, mut missing) = score_set(eval, &ckpt.model, EVAL_SET, |w| w)?;
    let mut sets = vec![plain];
    if trimmed {
        let (t, m) = score_set(eval, &ckpt.model, EVAL_TRIM_SET, |w| trim_nonspeech(&w, gate_db))?;
        sets.push(t);
        missing.extend(m);
    }
    missing.sort();
    missing.dedup();
    Ok((sets, missing))
}

struct SpoofData {
    set: PairedTrialSet,
    train: TrainingData,
    dev: TrainingData,
}

fn prepare(set: PairedTrialSet, fe: &Frontend, cfg: &ExperimentConfig, k: usize, missing: &mut Vec<String>) -> Result<SpoofData> {
    let plan = cfg.augment_plan();
    let train_m = select(&set.manifest, |r| r.subset == Subset::Train)?;
    let dev_m = select(&set.manifest, |r| r.subset == Subset::Dev)?;
    let (train, m1) = load_examples(&train_m, fe, Some(&plan), k)?;
    let (dev, m2) = load_examples(&dev_m, fe, None, 0)?;
    missing.extend(m1);
    missing.extend(m2);
    Ok(SpoofData { set, train, dev })
}

pub fn run_experiment(cfg: &ExperimentConfig, out: &Path) -> Result<Report> {
    cfg.validate()?;
    create_dir(out)?;
    let mut manifests = BTreeMap::new();
    let mut missing: BTreeMap<String, Vec<String>> = BTreeMap::new();

    let bona = timed("corpus", || {
        let m = match &cfg.corpus.manifest {
            Some(p) => TrialManifest::load(p)?,
            None => gen_desk_corpus(cfg.corpus.n_trials, cfg.corpus_seed(), &out.join("corpus"))?,
        };
        select(&m, |r| r.label.is_bonafide())
    })?;
    manifests.insert("corpus".to_string(), bona.content_hash());

    let native = timed("synthesis", || {
        let dir = out.join("vocoded");
        let set = build_vocoded_set(&bona, &cfg.channels()?, &dir)?;
        set.manifest.save(dir.join("manifest.tsv"))?;
        Ok(set)
    })?;
    manifests.insert("vocoded".to_string(), native.manifest.content_hash());

    let needs_roundtrip = cfg.systems.iter().any(|s| s.data == SpoofSource::Roundtrip);
    let roundtrip = if needs_roundtrip {
        let set = timed("synthesis-roundtrip", || {
            let dir = out.join("vocoded_roundtrip");
            let train_dev = select(&bona, |r| r.subset != Subset::Eval)?;
            let set = build_vocoded_set(&train_dev, &cfg.roundtrip_channels()?, &dir)?;
            set.manifest.save(dir.join("manifest.tsv"))?;
            Ok(set)
        })?;
        manifests.insert("vocoded_roundtrip".to_string(), set.manifest.content_hash());
        Some(set)
    } else {
        None
    };

    let first = bona.records.first().ok_or_else(|| Error::EmptyInput("corpus is empty".into()))?;
    let rate = read_wav(bona.resolve(first)).map_err(|e| e.in_stage("features"))?.sample_rate();
    let fe_cfg = FrontendConfig::for_rate(rate);
    let fe = Frontend::new(fe_cfg)?;
    let max_views = |src: SpoofSource| {
        cfg.systems
            .iter()
            .filter(|s| s.data == src)
            .map(|s| s.aug_views)
            .max()
            .unwrap_or(0)
    };
    let mut feature_missing = Vec::new();
    let native = timed("features", || prepare(native, &fe, cfg, max_views(SpoofSource::Native), &mut feature_missing))?;
    let roundtrip = match roundtrip {
        Some(set) => Some(timed("features-roundtrip", || {
            prepare(set, &fe, cfg, max_views(SpoofSource::Roundtrip), &mut feature_missing)
        })?),
        None => None,
    };
    missing.insert("features".to_string(), feature_missing);

    let eval = select(&native.set.manifest, |r| r.subset == Subset::Eval)?;
    if eval.records.is_empty() {
        return Err(Error::Data("no eval trials".into()).in_stage("scoring"));
    }
    manifests.insert("eval".to_string(), eval.content_hash());

    let mut runs = Vec::new();
    let mut score_missing = Vec::new();
    for system in &cfg.systems {
        let data = match system.data {
            SpoofSource::Native => &native,
            SpoofSource::Roundtrip => roundtrip.as_ref().expect("built when a system needs it"),
        };
        let tcfg = system.train_config(&cfg.train);
        let train_set = data.train.with_views(1 + system.aug_views);
        for &s in &cfg.train.seeds {
            let stage = format!("train {} seed {s}", system.name);
            let outcome = timed(&stage, || train(&train_set, &data.dev, &tcfg, fe_cfg, cfg.run_seed(s)))?;
            let dir = out.join("runs").join(&system.name).join(format!("seed-{s}"));
            create_dir(&dir)?;
            let ckpt = Checkpoint::new(outcome.model, tcfg.hash());
            ckpt.save(dir.join("checkpoint.json"))?;
            write_text(&dir.join("history.csv"), &history_csv(&outcome.history))?;

            let stage = format!("score {} seed {s}", system.name);
            let (sets, miss) = timed(&stage, || score_eval_sets(&eval, &ckpt, cfg.eval.trimmed, cfg.eval.trim_gate_db))?;
            score_missing.extend(miss);
            let mut results = Vec::new();
            for set in &sets {
                let name = set.entries.first().map(|e| e.set_name.clone()).unwrap_or_default();
                let scores: Vec<(String, f64)> = set.entries.iter().map(|e| (e.trial_id.clone(), e.score)).collect();
                write_scores(&dir.join(format!("scores_{name}.txt")), &scores)?;
                let groups = group_analysis(set, &identity_grouping(set)).map_err(|e| e.in_stage(&stage))?;
                write_text(&dir.join(format!("groups_{name}.csv")), &group_report_csv(&groups))?;
                results.push((name, compute_eer(set).map_err(|e| e.in_stage(&stage))?));
            }
            if sets.len() > 1 {
                results.push((POOLED_SET.to_string(), pooled_eer(&sets).map_err(|e| e.in_stage(&stage))?));
            }
            for (set, eer) in results {
                info!("{} seed {s} {set}: EER {:.4}", system.name, eer.eer);
                runs.push(RunResult {
                    system: system.name.clone(),
                    seed: s,
                    set,
                    eer,
                    best_epoch: outcome.best_epoch,
                    epochs: outcome.history.len(),
                });
            }
        }
    }
    score_missing.sort();
    score_missing.dedup();
    missing.insert("scoring".to_string(), score_missing);

    let (means, significance) = aggregate(&runs, cfg.eval.alpha)?;
    let report = Report {
        config: cfg.clone(),
        config_hash: cfg.hash(),
        manifests,
        runs,
        means,
        significance,
        missing,
    };
    report.write(&out.join("report"))?;
    Ok(report)
}

/// Seed means per (system, set) and, per set, the significance matrix over
/// systems using seed-mean EERs.
pub fn aggregate(runs: &[RunResult], alpha: f64) -> Result<(Vec<MeanRow>, BTreeMap<String, SignificanceMatrix>)> {
    let mut grouped: BTreeMap<(String, String), Vec<EerResult>> = BTreeMap::new();
    for r in runs {
        grouped.entry((r.set.clone(), r.system.clone())).or_default().push(r.eer);
    }
    let mut means = Vec::new();
    let mut by_set: BTreeMap<String, BTreeMap<String, EerResult>> = BTreeMap::new();
    for ((set, system), results) in &grouped {
        let mean = results.iter().map(|r| r.eer).sum::<f64>() / results.len() as f64;
        means.push(MeanRow {
            system: system.clone(),
            set: set.clone(),
            mean_eer: mean,
            n_seeds: results.len(),
        });
        by_set
            .entry(set.clone())
            .or_default()
            .insert(system.clone(), EerResult { eer: mean, ..results[0] });
    }
    let mut significance = BTreeMap::new();
    for (set, systems) in by_set {
        if systems.len() >= 2 {
            significance.insert(set, significance_matrix(&systems, alpha)?);
        }
    }
    Ok((means, significance))
}

/// Output root: `--out`, else the config's `out_dir`, else `default`; a
/// relative result is placed under `root` when given.
pub fn resolve_out_dir(cli: Option<&Path>, config: Option<&Path>, default: &Path, root: Option<&Path>) -> PathBuf {
    let chosen = cli.or(config).unwrap_or(default);
    match root {
        Some(r) if chosen.is_relative() => r.join(chosen),
        _ => chosen.to_path_buf(),
    }
}
