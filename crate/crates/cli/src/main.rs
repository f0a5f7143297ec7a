use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};
use log::{info, warn};

use vocspoof_core::copy_synth::build_vocoded_set;
use vocspoof_core::harness::{gen_desk_corpus, resolve_out_dir, run_experiment, score_eval_sets, select};
use vocspoof_core::metrics::{
    compute_eer, group_analysis, group_report_csv, histogram_csv, identity_grouping, pooled_eer, read_scores,
    write_scores,
};
use vocspoof_core::model::{history_csv, load_examples, train, Frontend, FrontendConfig};
use vocspoof_core::stats::significance_matrix;
use vocspoof_core::{Checkpoint, EerResult, Error, ErrorClass, ExperimentConfig, LossMode, ScoreSet, Subset, TrialManifest};

const OUT_ROOT_ENV: &str = "VOCSPOOF_OUT_ROOT";

#[derive(Parser)]
#[command(name = "vocspoof", version, about = "Copy-synthesis spoofing experiments and countermeasure evaluation")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Master seed (overrides the config file).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Experiment configuration (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory; relative paths go under $VOCSPOOF_OUT_ROOT when set.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic bona fide desk corpus.
    GenCorpus {
        #[arg(long)]
        n_trials: Option<usize>,
    },
    /// Copy-synthesize every bona fide trial through the configured channels.
    Synth {
        #[arg(long)]
        manifest: PathBuf,
        /// Comma-separated channels, e.g. `gl-mel80,lpc16@24000`.
        #[arg(long, value_delimiter = ',')]
        channels: Option<Vec<String>>,
    },
    /// Train one countermeasure per configured seed on the train/dev subsets.
    Train {
        #[arg(long)]
        manifest: PathBuf,
        /// Take loss mode and views from this `[[systems]]` entry.
        #[arg(long)]
        system: Option<String>,
        #[arg(long)]
        loss_mode: Option<LossMode>,
        #[arg(long)]
        aug_views: Option<usize>,
    },
    /// Score trials with a checkpoint (full length, no cropping).
    Score {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        /// Restrict to one subset (train, dev or eval).
        #[arg(long)]
        subset: Option<Subset>,
        /// Also score with non-speech edges trimmed.
        #[arg(long)]
        trim: bool,
    },
    /// EER of one or more score files, plus their pooled EER.
    Eer {
        #[arg(long, required = true)]
        scores: Vec<PathBuf>,
        #[arg(long)]
        manifest: PathBuf,
    },
    /// Per-attack EERs and score histograms.
    GroupReport {
        #[arg(long)]
        scores: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        /// TSV of `attack_tag<TAB>category`; defaults to one group per tag.
        #[arg(long)]
        grouping: Option<PathBuf>,
    },
    /// Holm-Bonferroni corrected pairwise EER tests between systems.
    Sigtest {
        /// `name=path` score files, one per system.
        #[arg(long, required = true)]
        scores: Vec<String>,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        alpha: Option<f64>,
    },
    /// Full experiment: corpus, synthesis, training, scoring and report.
    Run,
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::GenCorpus { .. } => "gen-corpus",
            Command::Synth { .. } => "synth",
            Command::Train { .. } => "train",
            Command::Score { .. } => "score",
            Command::Eer { .. } => "eer",
            Command::GroupReport { .. } => "group-report",
            Command::Sigtest { .. } => "sigtest",
            Command::Run => "run",
        }
    }
}

fn load_config(common: &Common) -> anyhow::Result<ExperimentConfig> {
    let mut cfg = match &common.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn out_dir(common: &Common, cfg: &ExperimentConfig, command: &str) -> anyhow::Result<PathBuf> {
    let root = std::env::var_os(OUT_ROOT_ENV).map(PathBuf::from);
    let default = Path::new("vocspoof-out").join(command);
    let dir = resolve_out_dir(common.out.as_deref(), cfg.out_dir.as_deref(), &default, root.as_deref());
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    Ok(dir)
}

fn write(path: &Path, text: &str) -> anyhow::Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))?;
    Ok(())
}

fn eer_row(out: &mut String, set: &str, e: &EerResult) {
    let _ = writeln!(out, "{set},{},{},{},{}", e.eer, e.threshold, e.n_tar, e.n_non);
}

fn load_score_set(path: &Path, manifest: &TrialManifest, name: &str) -> anyhow::Result<ScoreSet> {
    let scores = read_scores(path)?;
    Ok(ScoreSet::from_scores(&scores, manifest, name)?)
}

fn set_name(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "scores".into())
}

fn execute(cli: Cli) -> anyhow::Result<()> {
    let cfg = load_config(&cli.common)?;
    let out = out_dir(&cli.common, &cfg, cli.command.name())?;
    match cli.command {
        Command::GenCorpus { n_trials } => {
            let n = n_trials.unwrap_or(cfg.corpus.n_trials);
            let m = gen_desk_corpus(n, cfg.corpus_seed(), &out)?;
            info!("wrote {} trials to {}", m.records.len(), out.display());
        }
        Command::Synth { manifest, channels } => {
            let mut cfg = cfg;
            if let Some(ch) = channels {
                cfg.synthesis.channels = ch;
            }
            let bona = select(&TrialManifest::load(&manifest)?, |r| r.label.is_bonafide())?;
            let set = build_vocoded_set(&bona, &cfg.channels()?, &out)?;
            set.manifest.save(out.join("manifest.tsv"))?;
            info!("{} bona fide and {} spoofed trials in {}", set.n_bonafide(), set.n_spoof(), out.display());
        }
        Command::Train {
            manifest,
            system,
            loss_mode,
            aug_views,
        } => {
            let mut tcfg = cfg.train.clone();
            if let Some(name) = system {
                let spec = cfg
                    .systems
                    .iter()
                    .find(|s| s.name == name)
                    .ok_or_else(|| Error::Config(format!("no system named {name:?} in the config")))?;
                tcfg = spec.train_config(&tcfg);
            }
            if let Some(m) = loss_mode {
                tcfg.loss_mode = m;
            }
            if let Some(k) = aug_views {
                tcfg.aug_views = k;
            }
            tcfg.validate()?;
            let m = TrialManifest::load(&manifest)?;
            let first = m.records.first().ok_or_else(|| Error::EmptyInput("empty manifest".into()))?;
            let rate = vocspoof_core::dsp::wav::read_wav(m.resolve(first))?.sample_rate();
            let fe_cfg = FrontendConfig::for_rate(rate);
            let fe = Frontend::new(fe_cfg)?;
            let plan = cfg.augment_plan();
            let (train_set, miss_t) = load_examples(&select(&m, |r| r.subset == Subset::Train)?, &fe, Some(&plan), tcfg.aug_views)?;
            let (dev_set, miss_d) = load_examples(&select(&m, |r| r.subset == Subset::Dev)?, &fe, None, 0)?;
            for id in miss_t.iter().chain(&miss_d) {
                warn!("unreadable trial {id}");
            }
            for &s in &tcfg.seeds {
                let outcome = train(&train_set, &dev_set, &tcfg, fe_cfg, cfg.run_seed(s))?;
                let dir = out.join(format!("seed-{s}"));
                std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
                Checkpoint::new(outcome.model, tcfg.hash()).save(dir.join("checkpoint.json"))?;
                write(&dir.join("history.csv"), &history_csv(&outcome.history))?;
                info!("seed {s}: best epoch {} of {}", outcome.best_epoch, outcome.history.len());
            }
        }
        Command::Score {
            checkpoint,
            manifest,
            subset,
            trim,
        } => {
            let ckpt = Checkpoint::load(&checkpoint)?;
            let m = TrialManifest::load(&manifest)?;
            let m = select(&m, |r| subset.is_none_or(|s| r.subset == s))?;
            let (sets, missing) = score_eval_sets(&m, &ckpt, trim, cfg.eval.trim_gate_db)?;
            for set in &sets {
                let name = set.entries.first().map(|e| e.set_name.as_str()).unwrap_or("eval");
                let scores: Vec<(String, f64)> = set.entries.iter().map(|e| (e.trial_id.clone(), e.score)).collect();
                write_scores(&out.join(format!("scores_{name}.txt")), &scores)?;
            }
            if !missing.is_empty() {
                warn!("{} trials could not be scored: {}", missing.len(), missing.join(", "));
                write(&out.join("missing.txt"), &(missing.join("\n") + "\n"))?;
            }
        }
        Command::Eer { scores, manifest } => {
            let m = TrialManifest::load(&manifest)?;
            let mut csv = String::from("set,eer,threshold,n_bonafide,n_spoof\n");
            let mut sets = Vec::new();
            for p in &scores {
                let set = load_score_set(p, &m, &set_name(p))?;
                eer_row(&mut csv, &set_name(p), &compute_eer(&set)?);
                sets.push(set);
            }
            if sets.len() > 1 {
                eer_row(&mut csv, "pooled", &pooled_eer(&sets)?);
            }
            print!("{csv}");
            write(&out.join("eer.csv"), &csv)?;
        }
        Command::GroupReport {
            scores,
            manifest,
            grouping,
        } => {
            let m = TrialManifest::load(&manifest)?;
            let set = load_score_set(&scores, &m, &set_name(&scores))?;
            let grouping = match grouping {
                Some(p) => parse_grouping(&p)?,
                None => identity_grouping(&set),
            };
            let groups = group_analysis(&set, &grouping)?;
            let report = group_report_csv(&groups);
            print!("{report}");
            write(&out.join("groups.csv"), &report)?;
            write(&out.join("histograms.csv"), &histogram_csv(&groups))?;
        }
        Command::Sigtest { scores, manifest, alpha } => {
            let m = TrialManifest::load(&manifest)?;
            let mut results = BTreeMap::new();
            for spec in &scores {
                let (name, path) = spec
                    .split_once('=')
                    .ok_or_else(|| Error::Config(format!("expected name=path, got {spec:?}")))?;
                let set = load_score_set(Path::new(path), &m, name)?;
                results.insert(name.to_string(), compute_eer(&set)?);
            }
            let matrix = significance_matrix(&results, alpha.unwrap_or(cfg.eval.alpha))?;
            print!("{}", matrix.p_values_csv());
            write(&out.join("significance_p.csv"), &matrix.p_values_csv())?;
            write(&out.join("significance_reject.csv"), &matrix.reject_csv())?;
        }
        Command::Run => {
            let report = run_experiment(&cfg, &out)?;
            print!("{}", report.means_csv());
        }
    }
    Ok(())
}

fn parse_grouping(path: &Path) -> anyhow::Result<BTreeMap<String, String>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty() && !l.starts_with('#'))
        .map(|l| {
            l.split_once('\t')
                .map(|(a, b)| (a.trim().to_string(), b.trim().to_string()))
                .ok_or_else(|| anyhow!(Error::Data(format!("{}: bad grouping line {l:?}", path.display()))))
        })
        .collect()
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.chain().find_map(|e| e.downcast_ref::<Error>()).map(Error::class) {
        Some(ErrorClass::Usage) => 1,
        Some(ErrorClass::Numerical) => 3,
        _ => 2,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let command = cli.command.name();
    match execute(cli).with_context(|| format!("{command} failed")) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
