//! Epoch loop: rollout collection under the curriculum, GAE, minibatch Adam
//! updates and periodic evaluation.

use std::collections::VecDeque;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::curriculum::{Curriculum, EnvParams};
use crate::env::{step, EnvConfig, EpisodeState, Track};
use crate::error::{invalid_arg, Error, Result};
use crate::eval::{evaluate_policy, EvalSet};
use crate::seed::{derive_seed, rng_for, stream};

use super::loss::{clipped_surrogate_loss, normalize_advantages, Batch, LossCoefficients};
use super::policy::{PolicyParams, ACT_DIM};

/// Objective value assigned to runs whose weights went non-finite.
pub const DEFAULT_FLOOR: f64 = -1000.0;
/// Completed episodes averaged into the per-epoch training reward.
pub const TRAIN_REWARD_WINDOW: usize = 10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    /// Optimization passes over each collected batch.
    pub update_epochs: usize,
    /// Transitions collected per epoch.
    pub batch_size: usize,
    pub minibatch_size: usize,
    pub total_epochs: u32,
    pub clip_epsilon: f64,
    pub gamma: f64,
    pub gae_lambda: f64,
    pub value_coeff: f64,
    pub entropy_coeff: f64,
    pub max_grad_norm: f64,
    /// Multiplier applied to environment rewards before advantage estimation.
    pub reward_scale: f64,
    pub hidden: usize,
    pub init_log_std: f64,
    /// Initial mean action (steering, acceleration, brake).
    pub init_action_bias: [f64; ACT_DIM],
    pub eval_every: u32,
    pub eval_n: usize,
    pub env: EnvConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::desk(false)
    }
}

impl TrainConfig {
    /// Full-scale configuration. Curriculum runs use the smaller learning rate.
    pub fn paper(curriculum: bool) -> Self {
        Self {
            learning_rate: if curriculum { 0.0002 } else { 0.0005 },
            update_epochs: 10,
            batch_size: 1000,
            minibatch_size: 250,
            total_epochs: 1000,
            clip_epsilon: 0.2,
            gamma: 0.99,
            gae_lambda: 0.95,
            value_coeff: 0.5,
            entropy_coeff: 0.01,
            max_grad_norm: 0.5,
            reward_scale: 0.01,
            hidden: 32,
            init_log_std: -0.5,
            init_action_bias: [0.0, 0.5, -0.5],
            eval_every: 50,
            eval_n: 10,
            env: EnvConfig::default(),
        }
    }

    /// Reduced configuration used by tests and the default CLI profile.
    pub fn desk(curriculum: bool) -> Self {
        Self {
            learning_rate: if curriculum { 0.002 } else { 0.005 },
            batch_size: 256,
            minibatch_size: 64,
            total_epochs: 120,
            hidden: 16,
            eval_every: 10,
            env: EnvConfig::desk(),
            ..Self::paper(curriculum)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("learning_rate", self.learning_rate),
            ("gamma", self.gamma),
            ("gae_lambda", self.gae_lambda),
            ("max_grad_norm", self.max_grad_norm),
            ("reward_scale", self.reward_scale),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(invalid_arg(format!("{name} must be positive, got {v}")));
            }
        }
        if !(self.clip_epsilon > 0.0 && self.clip_epsilon < 1.0) {
            return Err(invalid_arg(format!("clip_epsilon must lie in (0, 1), got {}", self.clip_epsilon)));
        }
        if self.gamma > 1.0 || self.gae_lambda > 1.0 {
            return Err(invalid_arg("gamma and gae_lambda must not exceed 1"));
        }
        if !(self.value_coeff >= 0.0 && self.entropy_coeff >= 0.0) {
            return Err(invalid_arg("loss coefficients must be non-negative"));
        }
        let counts = [
            ("update_epochs", self.update_epochs),
            ("batch_size", self.batch_size),
            ("minibatch_size", self.minibatch_size),
            ("total_epochs", self.total_epochs as usize),
            ("hidden", self.hidden),
            ("eval_every", self.eval_every as usize),
            ("eval_n", self.eval_n),
            ("env.base_tiles", self.env.base_tiles),
            ("env.max_steps", self.env.max_steps as usize),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(invalid_arg(format!("{name} must be at least 1")));
            }
        }
        if self.minibatch_size > self.batch_size {
            return Err(invalid_arg("minibatch_size must not exceed batch_size"));
        }
        Ok(())
    }

    pub fn loss_coefficients(&self) -> LossCoefficients {
        LossCoefficients {
            clip_epsilon: self.clip_epsilon,
            value_coeff: self.value_coeff,
            entropy_coeff: self.entropy_coeff,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: u32,
    pub kappa: f64,
    pub p: f64,
    /// Mean return of the last few completed training episodes.
    pub train_reward: f64,
    pub episodes_completed: u32,
    pub tracks_generated: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub epoch: u32,
    pub mean_reward: f64,
    pub std_reward: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainingCurve {
    pub epochs: Vec<EpochRecord>,
    pub evals: Vec<EvalRecord>,
    /// First epoch whose update produced non-finite values.
    pub diverged: Option<u32>,
}

#[derive(Serialize)]
struct CurveRow {
    epoch: u32,
    train_reward: Option<f64>,
    eval_mean: Option<f64>,
    eval_std: Option<f64>,
}

impl TrainingCurve {
    /// Highest mean evaluation reward over all recorded evaluations.
    pub fn peak_eval(&self) -> Option<f64> {
        self.evals.iter().map(|e| e.mean_reward).reduce(f64::max)
    }

    pub fn final_eval(&self) -> Option<&EvalRecord> {
        self.evals.last()
    }

    /// Writes `epoch,train_reward,eval_mean,eval_std`; absent values are empty.
    pub fn write_csv<W: std::io::Write>(&self, out: W) -> Result<()> {
        let last = self
            .epochs
            .iter()
            .map(|r| r.epoch)
            .chain(self.evals.iter().map(|e| e.epoch))
            .max();
        let mut w = csv::Writer::from_writer(out);
        if let Some(last) = last {
            for epoch in 0..=last {
                let train = self.epochs.iter().find(|r| r.epoch == epoch);
                let ev = self.evals.iter().find(|e| e.epoch == epoch);
                if train.is_none() && ev.is_none() {
                    continue;
                }
                w.serialize(CurveRow {
                    epoch,
                    train_reward: train.map(|r| r.train_reward),
                    eval_mean: ev.map(|e| e.mean_reward),
                    eval_std: ev.map(|e| e.std_reward),
                })?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub policy: PolicyParams,
    pub curve: TrainingCurve,
}

struct Adam {
    lr: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(n: usize, lr: f64) -> Self {
        Self { lr, m: vec![0.0; n], v: vec![0.0; n], t: 0 }
    }

    fn step(&mut self, theta: &mut [f64], grad: &[f64]) {
        self.t += 1;
        let c1 = 1.0 - Self::BETA1.powi(self.t);
        let c2 = 1.0 - Self::BETA2.powi(self.t);
        for i in 0..theta.len() {
            self.m[i] = Self::BETA1 * self.m[i] + (1.0 - Self::BETA1) * grad[i];
            self.v[i] = Self::BETA2 * self.v[i] + (1.0 - Self::BETA2) * grad[i] * grad[i];
            theta[i] -= self.lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + Self::EPS);
        }
    }
}

struct Running {
    track: Track,
    state: EpisodeState,
    ret: f64,
}

struct Rollout {
    batch: Batch,
    values: Vec<f64>,
    rewards: Vec<f64>,
    /// Episode ended at this step.
    ends: Vec<bool>,
    /// Value of the successor state used for bootstrapping (0 after a true terminal).
    next_values: Vec<f64>,
}

/// Generalized advantage estimates and value targets.
fn gae(r: &Rollout, gamma: f64, lambda: f64) -> (Vec<f64>, Vec<f64>) {
    let n = r.rewards.len();
    let mut adv = vec![0.0; n];
    let mut carry = 0.0;
    for t in (0..n).rev() {
        let next_v = if r.ends[t] || t + 1 == n { r.next_values[t] } else { r.values[t + 1] };
        let delta = r.rewards[t] + gamma * next_v - r.values[t];
        let continues = !r.ends[t] && t + 1 < n;
        carry = delta + if continues { gamma * lambda * carry } else { 0.0 };
        adv[t] = carry;
    }
    let returns = adv.iter().zip(&r.values).map(|(a, v)| a + v).collect();
    (adv, returns)
}

fn grad_norm_clip(grad: &mut [f64], max_norm: f64) {
    let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        grad.iter_mut().for_each(|g| *g *= s);
    }
}

/// Trains a fresh policy under `curriculum`. Deterministic given `seed`.
pub fn train(curriculum: &Curriculum, config: &TrainConfig, seed: u64, eval_set: &EvalSet) -> Result<TrainOutcome> {
    config.validate()?;
    if curriculum.max_epoch() != config.total_epochs {
        return Err(invalid_arg(format!(
            "curriculum spans {} epochs but training runs {}",
            curriculum.max_epoch(),
            config.total_epochs
        )));
    }
    let mut init_rng = rng_for(seed, stream::INIT, 0);
    let mut params = PolicyParams::init(config.hidden, config.init_log_std, &mut init_rng);
    params.set_action_bias(config.init_action_bias);
    let mut adam = Adam::new(params.n_params(), config.learning_rate);
    let coeffs = config.loss_coefficients();
    let mut act_rng = rng_for(seed, stream::TRAIN, 0);
    let mut shuffle_rng = rng_for(seed, stream::TRAIN, 1);
    let eval_seed = derive_seed(seed, stream::EVAL, 0);

    let mut curve = TrainingCurve::default();
    let mut running: Option<Running> = None;
    let mut tracks = 0u64;
    let mut recent: VecDeque<f64> = VecDeque::with_capacity(TRAIN_REWARD_WINDOW);

    let evaluate = |params: &PolicyParams, epoch: u32, curve: &mut TrainingCurve| -> Result<()> {
        let ev = evaluate_policy(params, eval_set, config.eval_n, eval_seed, &config.env)?;
        curve.evals.push(EvalRecord { epoch, mean_reward: ev.report.mean_reward, std_reward: ev.report.std_reward });
        Ok(())
    };

    'epochs: for epoch in 0..config.total_epochs {
        if epoch % config.eval_every == 0 {
            evaluate(&params, epoch, &mut curve)?;
        }
        let psi: EnvParams = curriculum.param_at(epoch)?;
        if running.as_ref().is_some_and(|r| r.track.params != psi) {
            running = None;
        }

        let mut ro = Rollout {
            batch: Batch::default(),
            values: Vec::with_capacity(config.batch_size),
            rewards: Vec::with_capacity(config.batch_size),
            ends: Vec::with_capacity(config.batch_size),
            next_values: Vec::with_capacity(config.batch_size),
        };
        let mut completed = 0u32;
        let mut generated = 0u32;
        while ro.rewards.len() < config.batch_size {
            let run = match running.as_mut() {
                Some(r) => r,
                None => {
                    let track = Track::generate(psi, derive_seed(seed, stream::TRACK, tracks), &config.env)?;
                    tracks += 1;
                    generated += 1;
                    let state = EpisodeState::new(&track, config.env.max_steps);
                    running.insert(Running { track, state, ret: 0.0 })
                }
            };
            let obs = run.state.observe(&run.track);
            let (action, logp, value) = params.sample(obs.as_slice(), &mut act_rng);
            let out = step(&run.track, &mut run.state, crate::env::Action::new(action[0], action[1], action[2]))?;
            run.ret += out.reward;
            ro.batch.observations.push(obs.0.to_vec());
            ro.batch.actions.push(action);
            ro.batch.old_log_probs.push(logp);
            ro.values.push(value);
            ro.rewards.push(out.reward * config.reward_scale);
            ro.ends.push(out.done);
            if out.done {
                let boot = if run.state.truncated() {
                    params.value(run.state.observe(&run.track).as_slice())
                } else {
                    0.0
                };
                ro.next_values.push(boot);
                if recent.len() == TRAIN_REWARD_WINDOW {
                    recent.pop_front();
                }
                recent.push_back(run.ret);
                completed += 1;
                running = None;
            } else if ro.rewards.len() == config.batch_size {
                ro.next_values.push(params.value(run.state.observe(&run.track).as_slice()));
            } else {
                ro.next_values.push(0.0);
            }
        }

        let (mut adv, returns) = gae(&ro, config.gamma, config.gae_lambda);
        normalize_advantages(&mut adv);
        ro.batch.advantages = adv;
        ro.batch.returns = returns;

        let mut order: Vec<usize> = (0..ro.batch.len()).collect();
        let last_good = params.clone();
        for _ in 0..config.update_epochs {
            order.shuffle(&mut shuffle_rng);
            for chunk in order.chunks(config.minibatch_size) {
                let mb = ro.batch.subset(chunk);
                let mut out = match clipped_surrogate_loss(&mb, &params, &coeffs) {
                    Ok(o) => o,
                    Err(Error::NumericalFailure(msg)) => {
                        log::warn!("training diverged at epoch {epoch}: {msg}");
                        curve.diverged = Some(epoch);
                        params = last_good;
                        break 'epochs;
                    }
                    Err(e) => return Err(e),
                };
                grad_norm_clip(&mut out.grad, config.max_grad_norm);
                adam.step(params.theta_mut(), &out.grad);
                params.clamp_log_std();
                if !params.is_finite() {
                    log::warn!("training diverged at epoch {epoch}: non-finite weights");
                    curve.diverged = Some(epoch);
                    params = last_good;
                    break 'epochs;
                }
            }
        }

        let train_reward = if recent.is_empty() {
            running.as_ref().map_or(0.0, |r| r.ret)
        } else {
            recent.iter().sum::<f64>() / recent.len() as f64
        };
        curve.epochs.push(EpochRecord {
            epoch,
            kappa: psi.kappa,
            p: psi.p,
            train_reward,
            episodes_completed: completed,
            tracks_generated: generated,
        });
    }

    if curve.diverged.is_none() && config.total_epochs % config.eval_every == 0 {
        evaluate(&params, config.total_epochs, &mut curve)?;
    }
    Ok(TrainOutcome { policy: params, curve })
}

/// Mean hard-set reward of the final policy, or `floor` for a diverged run.
pub fn objective_from_training(
    curve: &TrainingCurve,
    policy: &PolicyParams,
    hard_set: &EvalSet,
    n_eval: usize,
    seed: u64,
    env: &EnvConfig,
    floor: f64,
) -> Result<f64> {
    if curve.diverged.is_some() {
        return Ok(floor);
    }
    Ok(evaluate_policy(policy, hard_set, n_eval, seed, env)?.report.mean_reward)
}
