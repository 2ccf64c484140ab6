//! Clipped-surrogate objective with value and entropy terms.

use crate::error::{Error, Result};

use super::policy::{PolicyParams, ACT_DIM};

/// Transitions used for one gradient step.
#[derive(Debug, Clone, Default)]
pub struct Batch {
    pub observations: Vec<Vec<f64>>,
    pub actions: Vec<[f64; ACT_DIM]>,
    pub old_log_probs: Vec<f64>,
    pub advantages: Vec<f64>,
    pub returns: Vec<f64>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.observations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.observations.is_empty()
    }

    pub fn subset(&self, idx: &[usize]) -> Batch {
        Batch {
            observations: idx.iter().map(|&i| self.observations[i].clone()).collect(),
            actions: idx.iter().map(|&i| self.actions[i]).collect(),
            old_log_probs: idx.iter().map(|&i| self.old_log_probs[i]).collect(),
            advantages: idx.iter().map(|&i| self.advantages[i]).collect(),
            returns: idx.iter().map(|&i| self.returns[i]).collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossCoefficients {
    pub clip_epsilon: f64,
    pub value_coeff: f64,
    pub entropy_coeff: f64,
}

impl Default for LossCoefficients {
    fn default() -> Self {
        Self { clip_epsilon: 0.2, value_coeff: 0.5, entropy_coeff: 0.01 }
    }
}

#[derive(Debug, Clone)]
pub struct LossOutput {
    pub total: f64,
    /// `-mean(min(r·A, clip(r)·A))`.
    pub policy: f64,
    /// `mean((V - R)²)`.
    pub value: f64,
    pub entropy: f64,
    /// Fraction of transitions whose ratio left the clip interval.
    pub clip_fraction: f64,
    pub grad: Vec<f64>,
}

/// Loss value and its exact gradient with respect to every policy parameter.
pub fn clipped_surrogate_loss(batch: &Batch, params: &PolicyParams, coeffs: &LossCoefficients) -> Result<LossOutput> {
    let n = batch.len();
    if n == 0 {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let eps = coeffs.clip_epsilon;
    let inv_n = 1.0 / n as f64;
    let log_std: Vec<f64> = params.log_std().to_vec();
    let inv_var: Vec<f64> = log_std.iter().map(|ls| (-2.0 * ls).exp()).collect();

    let mut grad = vec![0.0; params.n_params()];
    let mut policy_sum = 0.0;
    let mut value_sum = 0.0;
    let mut clipped = 0usize;

    for i in 0..n {
        let cache = params.forward(&batch.observations[i]);
        let logp = params.log_prob(&cache, &batch.actions[i]);
        let ratio = (logp - batch.old_log_probs[i]).exp();
        let adv = batch.advantages[i];
        let surr1 = ratio * adv;
        let surr2 = ratio.clamp(1.0 - eps, 1.0 + eps) * adv;
        policy_sum += surr1.min(surr2);
        if ratio < 1.0 - eps || ratio > 1.0 + eps {
            clipped += 1;
        }

        // d(policy loss)/d(logp); zero when the clipped branch is active
        let d_logp = if surr1 <= surr2 { -ratio * adv * inv_n } else { 0.0 };
        let mut d_mean = [0.0; ACT_DIM];
        let mut d_log_std = [0.0; ACT_DIM];
        for a in 0..ACT_DIM {
            let diff = batch.actions[i][a] - cache.mean[a];
            d_mean[a] = d_logp * diff * inv_var[a];
            d_log_std[a] = d_logp * (diff * diff * inv_var[a] - 1.0);
        }
        let verr = cache.value - batch.returns[i];
        value_sum += verr * verr;
        let d_value = coeffs.value_coeff * 2.0 * verr * inv_n;
        params.backward(&cache, &d_mean, &d_log_std, d_value, &mut grad);
    }

    let entropy = params.entropy();
    // d(-c·H)/d(log_std) = -c per dimension
    let ls_offset = params.log_std_index();
    for a in 0..ACT_DIM {
        grad[ls_offset + a] -= coeffs.entropy_coeff;
    }

    let policy = -policy_sum * inv_n;
    let value = value_sum * inv_n;
    let total = policy + coeffs.value_coeff * value - coeffs.entropy_coeff * entropy;
    if !total.is_finite() || grad.iter().any(|g| !g.is_finite()) {
        let max_adv = batch.advantages.iter().fold(0.0f64, |m, a| m.max(a.abs()));
        let max_ret = batch.returns.iter().fold(0.0f64, |m, r| m.max(r.abs()));
        return Err(Error::NumericalFailure(format!(
            "non-finite PPO loss (policy {policy}, value {value}) on batch of {n}: max |A| {max_adv}, max |R| {max_ret}"
        )));
    }
    Ok(LossOutput {
        total,
        policy,
        value,
        entropy,
        clip_fraction: clipped as f64 * inv_n,
        grad,
    })
}

/// Standardizes advantages to zero mean and unit variance in place.
pub fn normalize_advantages(adv: &mut [f64]) {
    let n = adv.len();
    if n < 2 {
        return;
    }
    let mean = adv.iter().sum::<f64>() / n as f64;
    let var = adv.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n as f64;
    let std = var.sqrt().max(1e-8);
    adv.iter_mut().for_each(|a| *a = (*a - mean) / std);
}
