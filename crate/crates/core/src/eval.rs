//! Robustness evaluation on easy/hard environment sets and the five-level
//! difficulty sweep.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::curriculum::{level_params, EnvMode, EnvParams, KAPPA_LEVELS, P_LEVELS};
use crate::env::{run_episode, EnvConfig, EpisodeMetrics, Policy, Track};
use crate::error::{invalid_arg, Result};
use crate::seed::{derive_seed, rng_for, stream};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSet {
    pub name: String,
    pub candidates: Vec<EnvParams>,
}

impl EvalSet {
    pub fn new(name: impl Into<String>, candidates: Vec<EnvParams>) -> Result<Self> {
        if candidates.is_empty() {
            return Err(invalid_arg("evaluation set must not be empty"));
        }
        for c in &candidates {
            c.validate()?;
        }
        Ok(Self { name: name.into(), candidates })
    }

    pub fn len(&self) -> usize {
        self.candidates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.candidates.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalSets {
    pub easy: EvalSet,
    pub hard: EvalSet,
}

/// Easy singleton and hard grid for the given environment mode.
pub fn build_sets(mode: EnvMode) -> EvalSets {
    let easy = EvalSet { name: "easy".into(), candidates: vec![level_params(mode, 0)] };
    let hard = match mode {
        EnvMode::Kp => KAPPA_LEVELS
            .iter()
            .flat_map(|&kappa| P_LEVELS.iter().map(move |&p| EnvParams { kappa, p }))
            .collect(),
        EnvMode::Kappa | EnvMode::P => (0..5).map(|i| level_params(mode, i)).collect(),
    };
    EvalSets { easy, hard: EvalSet { name: "hard".into(), candidates: hard } }
}

/// Difficulty buckets pairing the i-th turn rate with the i-th obstacle probability.
pub fn difficulty_buckets(mode: EnvMode) -> Vec<EvalSet> {
    (0..5)
        .map(|i| EvalSet { name: format!("bucket_{}", i + 1), candidates: vec![level_params(mode, i)] })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub mean_reward: f64,
    pub std_reward: f64,
    pub collision_obstacle_ratio: f64,
    pub mean_tiles_visited: f64,
    pub mean_grass_fraction: f64,
    pub mean_collisions: f64,
    pub n_eval: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub index: usize,
    pub params: EnvParams,
    pub track_seed: u64,
    pub metrics: EpisodeMetrics,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub report: MetricsReport,
    pub episodes: Vec<EpisodeRecord>,
}

/// Draws `(params, track seed)` pairs uniformly over the candidates.
pub fn sample_environments(set: &EvalSet, n_eval: usize, seed: u64) -> Vec<(EnvParams, u64)> {
    let mut rng = rng_for(seed, stream::EVAL, 0);
    (0..n_eval)
        .map(|_| {
            let idx = rng.random_range(0..set.candidates.len());
            (set.candidates[idx], rng.random::<u64>())
        })
        .collect()
}

/// Order-independent mean: values are sorted before a compensated sum.
fn stable_mean(mut values: Vec<f64>) -> f64 {
    let n = values.len() as f64;
    values.sort_by(f64::total_cmp);
    let mut sum = 0.0;
    let mut comp = 0.0;
    for v in values {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            comp += (sum - t) + v;
        } else {
            comp += (v - t) + sum;
        }
        sum = t;
    }
    (sum + comp) / n
}

/// Aggregates per-episode records into a report. Population std.
pub fn aggregate(episodes: &[EpisodeRecord]) -> Result<MetricsReport> {
    if episodes.is_empty() {
        return Err(invalid_arg("cannot aggregate zero episodes"));
    }
    let col = |f: fn(&EpisodeMetrics) -> f64| -> Vec<f64> { episodes.iter().map(|e| f(&e.metrics)).collect() };
    let mean_reward = stable_mean(col(|m| m.total_reward));
    let var = stable_mean(episodes.iter().map(|e| (e.metrics.total_reward - mean_reward).powi(2)).collect());
    Ok(MetricsReport {
        mean_reward,
        std_reward: var.sqrt(),
        collision_obstacle_ratio: stable_mean(col(|m| m.collision_obstacle_ratio())),
        mean_tiles_visited: stable_mean(col(|m| m.tiles_visited as f64)),
        mean_grass_fraction: stable_mean(col(|m| m.grass_fraction)),
        mean_collisions: stable_mean(col(|m| m.collisions as f64)),
        n_eval: episodes.len(),
    })
}

/// Runs `n_eval` episodes on environments sampled from `set`.
pub fn evaluate_policy(
    policy: &dyn Policy,
    set: &EvalSet,
    n_eval: usize,
    seed: u64,
    env: &EnvConfig,
) -> Result<Evaluation> {
    if n_eval == 0 {
        return Err(invalid_arg("n_eval must be at least 1"));
    }
    if set.is_empty() {
        return Err(invalid_arg("evaluation set must not be empty"));
    }
    let draws = sample_environments(set, n_eval, seed);
    let episodes = draws
        .par_iter()
        .enumerate()
        .map(|(index, &(params, track_seed))| {
            let track = Track::generate(params, track_seed, env)?;
            let metrics = run_episode(&track, policy, derive_seed(seed, stream::EPISODE, index as u64), env.max_steps)?;
            Ok(EpisodeRecord { index, params, track_seed, metrics })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Evaluation { report: aggregate(&episodes)?, episodes })
}

/// Evaluates on each of the five difficulty buckets, easiest first.
pub fn difficulty_sweep(
    policy: &dyn Policy,
    mode: EnvMode,
    n_per_bucket: usize,
    seed: u64,
    env: &EnvConfig,
) -> Result<Vec<(EvalSet, Evaluation)>> {
    if n_per_bucket == 0 {
        return Err(invalid_arg("n_per_bucket must be at least 1"));
    }
    difficulty_buckets(mode)
        .into_iter()
        .enumerate()
        .map(|(i, bucket)| {
            let ev = evaluate_policy(policy, &bucket, n_per_bucket, derive_seed(seed, stream::SWEEP, i as u64), env)?;
            Ok((bucket, ev))
        })
        .collect()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TableRow {
    pub training_scheme: String,
    pub test_setting: String,
    pub average_reward: f64,
    pub reward_std: f64,
    pub collision_obstacle_ratio: f64,
    pub tiles_visited: f64,
    pub time_on_grass: f64,
    pub collisions: f64,
    pub n_eval: usize,
}

impl TableRow {
    pub fn new(scheme: &str, setting: &str, r: &MetricsReport) -> Self {
        Self {
            training_scheme: scheme.into(),
            test_setting: setting.into(),
            average_reward: r.mean_reward,
            reward_std: r.std_reward,
            collision_obstacle_ratio: r.collision_obstacle_ratio,
            tiles_visited: r.mean_tiles_visited,
            time_on_grass: r.mean_grass_fraction,
            collisions: r.mean_collisions,
            n_eval: r.n_eval,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepRow {
    pub policy: String,
    pub bucket: usize,
    pub kappa: f64,
    pub p: f64,
    pub mean_reward: f64,
    pub std_reward: f64,
    pub n_eval: usize,
}

pub fn write_csv<W: std::io::Write, R: Serialize>(rows: &[R], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}
