//! `curbo`: train baselines, run curriculum searches and evaluate policies.

mod config;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::Parser;
use curriculum_bo::curriculum::{Curriculum, EnvMode};
use curriculum_bo::digest::{bytes_digest, config_digest};
use curriculum_bo::env::EnvConfig;
use curriculum_bo::eval::{difficulty_sweep, evaluate_policy, write_csv, EvalSet, SweepRow, TableRow};
use curriculum_bo::pipeline::{self, final_eval_seed, Profile};
use curriculum_bo::ppo::{PolicyParams, TrainOutcome};
use curriculum_bo::search::write_report_csv;
use serde::Serialize;

use config::{Mode, Overrides, RunConfig, TestSet};

#[derive(Parser, Debug)]
#[command(name = "curbo", version, about = "Curriculum search for a procedural racing task")]
struct Cli {
    #[arg(long, value_enum)]
    mode: Option<Mode>,
    /// Configuration scale (desk or paper).
    #[arg(long)]
    profile: Option<Profile>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// TOML file merged over the profile defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum)]
    set: Option<TestSet>,
    /// Evaluation episodes (per bucket for sweeps).
    #[arg(long)]
    n: Option<usize>,
    /// Policy checkpoint to evaluate, or search checkpoint to resume.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Environment variables varied by the ladder and test sets (kp, kappa or p).
    #[arg(long)]
    env_mode: Option<EnvMode>,
}

#[derive(Serialize)]
struct OutputFile {
    path: String,
    sha256: String,
}

#[derive(Serialize)]
struct Manifest {
    tool: &'static str,
    version: &'static str,
    mode: Mode,
    profile: Profile,
    env_mode: EnvMode,
    seed: u64,
    config_digest: String,
    outputs: Vec<OutputFile>,
}

struct Outputs {
    dir: PathBuf,
    files: Vec<OutputFile>,
}

impl Outputs {
    fn write(&mut self, name: &str, bytes: &[u8]) -> Result<()> {
        let path = self.dir.join(name);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        fs::write(&path, bytes).with_context(|| format!("writing {}", path.display()))?;
        self.files.push(OutputFile { path: name.to_string(), sha256: bytes_digest(bytes) });
        Ok(())
    }

    /// Records a file some other component already wrote.
    fn record(&mut self, name: &str) -> Result<()> {
        let path = self.dir.join(name);
        let bytes = fs::read(&path).with_context(|| format!("reading {}", path.display()))?;
        self.files.push(OutputFile { path: name.to_string(), sha256: bytes_digest(&bytes) });
        Ok(())
    }
}

fn csv_bytes<R: Serialize>(rows: &[R]) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    write_csv(rows, &mut buf)?;
    Ok(buf)
}

fn load_policy(path: &Path) -> Result<PolicyParams> {
    let file = fs::File::open(path).with_context(|| format!("cannot open checkpoint {}", path.display()))?;
    let (policy, digest) = PolicyParams::read_checkpoint(std::io::BufReader::new(file))
        .with_context(|| format!("cannot read checkpoint {}", path.display()))?;
    log::info!("loaded {} (config {})", path.display(), &digest[..digest.len().min(12)]);
    Ok(policy)
}

fn test_sets(cfg: &RunConfig) -> Vec<EvalSet> {
    let sets = cfg.experiment.sets();
    vec![sets.easy, sets.hard]
}

fn set_named(cfg: &RunConfig, set: TestSet) -> EvalSet {
    let sets = cfg.experiment.sets();
    match set {
        TestSet::Easy => sets.easy,
        TestSet::Hard => sets.hard,
    }
}

/// Curve, policy, schedule and easy/hard table for a finished training run.
fn emit_training(
    out: &mut Outputs,
    cfg: &RunConfig,
    digest: &str,
    scheme: &str,
    curriculum: &Curriculum,
    outcome: &TrainOutcome,
    env: &EnvConfig,
) -> Result<()> {
    let mut curve = Vec::new();
    outcome.curve.write_csv(&mut curve)?;
    out.write("curve.csv", &curve)?;
    let mut ckpt = Vec::new();
    outcome.policy.write_checkpoint(&mut ckpt, digest)?;
    out.write("policy.ckpt", &ckpt)?;
    out.write("curriculum.json", curriculum.to_json()?.as_bytes())?;
    if let Some(e) = outcome.curve.diverged {
        log::warn!("training diverged at epoch {e}; kept the last finite parameters");
    }

    let n = cfg.run.n.unwrap_or(cfg.experiment.final_n_eval);
    let mut rows = Vec::new();
    for set in test_sets(cfg) {
        let ev = evaluate_policy(&outcome.policy, &set, n, final_eval_seed(cfg.run.seed), env)?;
        log::info!("{scheme} on {}: {:.1} ± {:.1}", set.name, ev.report.mean_reward, ev.report.std_reward);
        rows.push(TableRow::new(scheme, &set.name, &ev.report));
    }
    out.write("table.csv", &csv_bytes(&rows)?)
}

fn run(cfg: &RunConfig) -> Result<()> {
    let dir = cfg.run.out.clone().expect("validated config has an output directory");
    fs::create_dir_all(&dir).with_context(|| format!("cannot create {}", dir.display()))?;
    let portable = cfg.portable();
    let digest = config_digest(&portable)?;
    let mut out = Outputs { dir: dir.clone(), files: Vec::new() };
    out.write("config.toml", portable.to_toml()?.as_bytes())?;

    let exp = &cfg.experiment;
    let seed = cfg.run.seed;
    match cfg.mode() {
        Mode::TrainDefault => {
            let outcome = pipeline::train_default(exp, seed)?;
            emit_training(&mut out, cfg, &digest, "default", &exp.default_curriculum()?, &outcome, &exp.train_default.env)?;
        }
        Mode::TrainManual => {
            let curriculum = exp.manual_curriculum()?;
            log::info!("manual changepoints {:?}", curriculum.changepoints());
            let outcome = pipeline::train_manual(exp, seed)?;
            emit_training(&mut out, cfg, &digest, "manual", &curriculum, &outcome, &exp.train_curriculum.env)?;
        }
        Mode::SearchBo => {
            let cp_name = "search_checkpoint.json";
            let cp = cfg.run.checkpoint.clone().unwrap_or_else(|| dir.join(cp_name));
            let res = pipeline::search_curriculum(exp, seed, Some(&cp))?;
            if cp == dir.join(cp_name) {
                out.record(cp_name)?;
            }
            let trials = &res.result.trials;
            let mut report = Vec::new();
            write_report_csv(trials, &mut report)?;
            out.write("search_report.csv", &report)?;
            out.write("search_result.json", serde_json::to_string_pretty(&res.result)?.as_bytes())?;
            for t in trials {
                if let Some(curve) = &t.curve {
                    let mut buf = Vec::new();
                    curve.write_csv(&mut buf)?;
                    out.write(&format!("trials/trial_{:02}_curve.csv", t.index), &buf)?;
                }
            }
            let best = &trials[res.result.best_by_final];
            log::info!("best trial {} x={:?} y={:.1}", best.index, best.x, best.y);
            let curriculum = best.curriculum.clone().expect("best trial has a curriculum");
            emit_training(&mut out, cfg, &digest, "bo", &curriculum, &res.best, &exp.train_curriculum.env)?;
        }
        Mode::Evaluate => {
            let path = cfg.run.checkpoint.as_deref().expect("validated");
            let policy = load_policy(path)?;
            let set = set_named(cfg, cfg.run.set);
            let n = cfg.run.n.unwrap_or(exp.final_n_eval);
            let ev = evaluate_policy(&policy, &set, n, final_eval_seed(seed), &exp.train_curriculum.env)?;
            let scheme = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
            log::info!("{scheme} on {}: {:.1} ± {:.1}", set.name, ev.report.mean_reward, ev.report.std_reward);
            out.write("table.csv", &csv_bytes(&[TableRow::new(&scheme, &set.name, &ev.report)])?)?;
        }
        Mode::Sweep => {
            let path = cfg.run.checkpoint.as_deref().expect("validated");
            let policy = load_policy(path)?;
            let n = cfg.run.n.unwrap_or(exp.sweep_n);
            let name = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
            let rows: Vec<SweepRow> = difficulty_sweep(&policy, exp.env_mode, n, final_eval_seed(seed), &exp.train_curriculum.env)?
                .into_iter()
                .enumerate()
                .map(|(i, (bucket, ev))| SweepRow {
                    policy: name.clone(),
                    bucket: i + 1,
                    kappa: bucket.candidates[0].kappa,
                    p: bucket.candidates[0].p,
                    mean_reward: ev.report.mean_reward,
                    std_reward: ev.report.std_reward,
                    n_eval: ev.report.n_eval,
                })
                .collect();
            out.write("sweep.csv", &csv_bytes(&rows)?)?;
        }
    }

    let manifest = Manifest {
        tool: env!("CARGO_PKG_NAME"),
        version: env!("CARGO_PKG_VERSION"),
        mode: cfg.mode(),
        profile: cfg.run.profile,
        env_mode: cfg.run.env_mode,
        seed,
        config_digest: digest,
        outputs: out.files,
    };
    fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    log::info!("wrote {}", dir.display());
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let text = match &cli.config {
        Some(p) => match fs::read_to_string(p) {
            Ok(t) => Some(t),
            Err(e) => {
                eprintln!("error: cannot read config {}: {e}", p.display());
                return ExitCode::from(2);
            }
        },
        None => None,
    };
    let overrides = Overrides {
        mode: cli.mode,
        profile: cli.profile,
        env_mode: cli.env_mode,
        seed: cli.seed,
        set: cli.set,
        n: cli.n,
        checkpoint: cli.checkpoint,
        out: cli.out,
    };
    let cfg = match RunConfig::resolve(text.as_deref(), &overrides) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e:#}");
            return ExitCode::from(2);
        }
    };
    match run(&cfg) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
