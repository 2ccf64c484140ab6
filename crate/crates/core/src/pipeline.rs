//! End-to-end experiment wiring shared by the command line and the tests.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::curriculum::{level_params, Curriculum, EnvMode, PsiLadder};
use crate::error::{invalid_arg, Result};
use crate::eval::{build_sets, evaluate_policy, EvalSets, Evaluation};
use crate::ppo::{objective_from_training, train, PolicyParams, TrainConfig, TrainOutcome};
use crate::search::{run_search_with_checkpoint, ObjectiveOutcome, SearchConfig, SearchResult};
use crate::seed::{derive_seed, stream};

/// Manual curriculum segment ends at full scale.
pub const PAPER_MANUAL_X: [f64; 3] = [197.0, 395.0, 774.0];
/// Epoch scale of the desk profile relative to full scale.
pub const DESK_SCALE: f64 = 0.12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    Desk,
    Paper,
}

impl std::str::FromStr for Profile {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "desk" => Ok(Profile::Desk),
            "paper" => Ok(Profile::Paper),
            other => Err(invalid_arg(format!("unknown profile {other:?} (expected desk or paper)"))),
        }
    }
}

impl std::fmt::Display for Profile {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Profile::Desk => "desk",
            Profile::Paper => "paper",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub env_mode: EnvMode,
    /// Training settings for the constant default-environment baseline.
    pub train_default: TrainConfig,
    /// Training settings for every curriculum run (manual and searched).
    pub train_curriculum: TrainConfig,
    pub search: SearchConfig,
    /// Segment end epochs of the manual curriculum.
    pub manual_x: Vec<f64>,
    /// Hard-set episodes behind each search objective value.
    pub objective_n_eval: usize,
    /// Episodes in a final robustness evaluation.
    pub final_n_eval: usize,
    /// Episodes per difficulty bucket.
    pub sweep_n: usize,
}

impl ExperimentConfig {
    pub fn for_profile(profile: Profile, env_mode: EnvMode) -> Self {
        let (train_default, train_curriculum, mut search, manual_x) = match profile {
            Profile::Paper => (
                TrainConfig::paper(false),
                TrainConfig::paper(true),
                SearchConfig::paper(),
                PAPER_MANUAL_X.to_vec(),
            ),
            Profile::Desk => {
                let cur = TrainConfig::desk(true);
                let search = SearchConfig::scaled(DESK_SCALE, cur.total_epochs);
                let manual = PAPER_MANUAL_X.iter().map(|x| (x * DESK_SCALE).round()).collect();
                (TrainConfig::desk(false), cur, search, manual)
            }
        };
        search.ladder = PsiLadder::standard(env_mode);
        Self {
            env_mode,
            train_default,
            train_curriculum,
            search,
            manual_x,
            objective_n_eval: 100,
            final_n_eval: 500,
            sweep_n: 100,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.train_default.validate()?;
        self.train_curriculum.validate()?;
        self.search.validate()?;
        if self.search.max_epoch != self.train_curriculum.total_epochs {
            return Err(invalid_arg("search.max_epoch must equal train_curriculum.total_epochs"));
        }
        if self.objective_n_eval == 0 || self.final_n_eval == 0 || self.sweep_n == 0 {
            return Err(invalid_arg("evaluation sizes must be at least 1"));
        }
        self.manual_curriculum()?;
        Ok(())
    }

    pub fn sets(&self) -> EvalSets {
        build_sets(self.env_mode)
    }

    pub fn default_curriculum(&self) -> Result<Curriculum> {
        Curriculum::constant(level_params(self.env_mode, 0), self.train_default.total_epochs)
    }

    pub fn manual_curriculum(&self) -> Result<Curriculum> {
        Curriculum::from_changepoints(&self.manual_x, &self.search.ladder, self.train_curriculum.total_epochs)
    }
}

/// Trains on the easiest setting for the whole run.
pub fn train_default(cfg: &ExperimentConfig, seed: u64) -> Result<TrainOutcome> {
    train(&cfg.default_curriculum()?, &cfg.train_default, seed, &cfg.sets().hard)
}

pub fn train_curriculum(cfg: &ExperimentConfig, curriculum: &Curriculum, seed: u64) -> Result<TrainOutcome> {
    train(curriculum, &cfg.train_curriculum, seed, &cfg.sets().hard)
}

pub fn train_manual(cfg: &ExperimentConfig, seed: u64) -> Result<TrainOutcome> {
    train_curriculum(cfg, &cfg.manual_curriculum()?, seed)
}

/// Seed of the hard-set episodes behind every objective value of a search.
pub fn objective_seed(seed: u64) -> u64 {
    derive_seed(seed, stream::OBJECTIVE, 0)
}

/// Seed of final robustness evaluations, disjoint from the objective episodes.
pub fn final_eval_seed(seed: u64) -> u64 {
    derive_seed(seed, stream::OBJECTIVE, 1)
}

#[derive(Debug, Clone)]
pub struct SearchOutcome {
    pub result: SearchResult,
    /// Policy retrained on the curriculum of the best trial by final objective.
    pub best: TrainOutcome,
}

/// Curriculum search where each trial trains with `seed` and scores the
/// final policy on the hard set. The search's own randomness uses
/// `cfg.search.master_seed` mixed with `seed`.
pub fn search_curriculum(cfg: &ExperimentConfig, seed: u64, checkpoint: Option<&Path>) -> Result<SearchOutcome> {
    let sets = cfg.sets();
    let tc = &cfg.train_curriculum;
    let obj_seed = objective_seed(seed);
    let mut search = cfg.search.clone();
    search.master_seed = derive_seed(cfg.search.master_seed, stream::SEARCH, seed);
    let result = run_search_with_checkpoint(
        &search,
        |input| {
            let out = train(input.curriculum, tc, seed, &sets.hard)?;
            let y = objective_from_training(
                &out.curve,
                &out.policy,
                &sets.hard,
                cfg.objective_n_eval,
                obj_seed,
                &tc.env,
                search.floor,
            )?;
            Ok(ObjectiveOutcome { y, curve: Some(out.curve) })
        },
        checkpoint,
    )?;
    let best_cur = result.trials[result.best_by_final]
        .curriculum
        .clone()
        .ok_or_else(|| invalid_arg("best trial has no valid curriculum"))?;
    let best = train(&best_cur, tc, seed, &sets.hard)?;
    Ok(SearchOutcome { result, best })
}

/// Hard-set robustness of a trained policy on held-out episodes.
pub fn final_evaluation(cfg: &ExperimentConfig, policy: &PolicyParams, seed: u64, n_eval: usize) -> Result<Evaluation> {
    evaluate_policy(policy, &cfg.sets().hard, n_eval, final_eval_seed(seed), &cfg.train_curriculum.env)
}
