//! Box-constrained limited-memory quasi-Newton minimization.
//!
//! Gradient projection handles the bounds: variables pinned at a bound with
//! the gradient pushing outward are frozen for the iteration, and the L-BFGS
//! two-loop recursion builds a direction on the remaining free variables.
//! Steps are projected back into the box and accepted by Armijo backtracking.

use std::collections::VecDeque;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid_arg, Error, Result};
use crate::seed::{rng_for, stream};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoxBounds {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl BoxBounds {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self> {
        let b = Self { lower, upper };
        b.validate()?;
        Ok(b)
    }

    /// Changepoint ranges `[150, 250] × [330, 450] × [730, 830]`.
    pub fn paper() -> Self {
        Self {
            lower: vec![150.0, 330.0, 730.0],
            upper: vec![250.0, 450.0, 830.0],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.lower.is_empty() || self.lower.len() != self.upper.len() {
            return Err(invalid_arg(format!(
                "box bounds have mismatched dimensions {} and {}",
                self.lower.len(),
                self.upper.len()
            )));
        }
        for (i, (l, u)) in self.lower.iter().zip(&self.upper).enumerate() {
            if !(l < u) || !l.is_finite() || !u.is_finite() {
                return Err(invalid_arg(format!("box dimension {i}: need lower < upper, got [{l}, {u}]")));
            }
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn center(&self) -> Vec<f64> {
        self.lower.iter().zip(&self.upper).map(|(l, u)| 0.5 * (l + u)).collect()
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        x.len() == self.dim()
            && x
                .iter()
                .zip(self.lower.iter().zip(&self.upper))
                .all(|(v, (l, u))| *v >= *l && *v <= *u)
    }

    pub fn project(&self, x: &mut [f64]) {
        for (v, (l, u)) in x.iter_mut().zip(self.lower.iter().zip(&self.upper)) {
            *v = v.clamp(*l, *u);
        }
    }

    /// Maps a point of the unit cube into the box.
    pub fn from_unit(&self, u: &[f64]) -> Vec<f64> {
        u.iter()
            .zip(self.lower.iter().zip(&self.upper))
            .map(|(t, (l, h))| l + t * (h - l))
            .collect()
    }

    /// Scales every bound by `factor` (used to shrink epoch ranges).
    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            lower: self.lower.iter().map(|v| v * factor).collect(),
            upper: self.upper.iter().map(|v| v * factor).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    /// Number of stored correction pairs.
    pub memory: usize,
    pub max_iters: usize,
    /// Tolerance on the infinity norm of the projected gradient.
    pub grad_tol: f64,
    /// Relative decrease below which the run counts as stalled.
    pub f_tol: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            memory: 10,
            max_iters: 200,
            grad_tol: 1e-6,
            f_tol: 1e-10,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.memory == 0 || self.max_iters == 0 || !(self.grad_tol > 0.0) || !(self.f_tol > 0.0) {
            return Err(invalid_arg(format!("optimizer settings must be positive: {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Status {
    /// Projected gradient below `grad_tol`.
    Converged,
    /// Relative decrease fell below `f_tol` before the gradient test passed.
    Stalled,
    MaxIters,
    /// No descent step could be found along the projected steepest-descent path.
    Degenerate,
}

#[derive(Debug, Clone)]
pub struct Minimum {
    pub x: Vec<f64>,
    pub f: f64,
    pub status: Status,
    pub iterations: usize,
    /// Objective value at `x0` followed by every accepted iterate.
    pub trace: Vec<f64>,
}

const ARMIJO_C1: f64 = 1e-4;
const MAX_BACKTRACKS: usize = 60;
const CURVATURE_EPS: f64 = 1e-10;

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn evaluate<F>(f: &mut F, x: &[f64]) -> Result<(f64, Vec<f64>)>
where
    F: FnMut(&[f64]) -> (f64, Vec<f64>),
{
    let (v, g) = f(x);
    if !v.is_finite() || g.iter().any(|c| !c.is_finite()) || g.len() != x.len() {
        return Err(Error::NumericalFailure(format!(
            "objective returned non-finite value or gradient at {x:?}"
        )));
    }
    Ok((v, g))
}

fn projected_gradient_norm(x: &[f64], g: &[f64], bounds: &BoxBounds) -> f64 {
    x.iter()
        .zip(g)
        .zip(bounds.lower.iter().zip(&bounds.upper))
        .map(|((xi, gi), (l, u))| ((xi - gi).clamp(*l, *u) - xi).abs())
        .fold(0.0, f64::max)
}

/// Variables that may move this iteration: not pinned at a bound by the gradient.
fn free_mask(x: &[f64], g: &[f64], bounds: &BoxBounds) -> Vec<bool> {
    x.iter()
        .zip(g)
        .zip(bounds.lower.iter().zip(&bounds.upper))
        .map(|((xi, gi), (l, u))| !((*xi <= *l && *gi > 0.0) || (*xi >= *u && *gi < 0.0)))
        .collect()
}

fn two_loop(g: &[f64], free: &[bool], history: &VecDeque<(Vec<f64>, Vec<f64>)>) -> Vec<f64> {
    let mask = |v: &[f64]| -> Vec<f64> { v.iter().zip(free).map(|(a, f)| if *f { *a } else { 0.0 }).collect() };
    let mut q = mask(g);
    let mut alphas = Vec::with_capacity(history.len());
    let mut used = Vec::with_capacity(history.len());
    for (s, y) in history.iter().rev() {
        let s = mask(s);
        let y = mask(y);
        let sy = dot(&s, &y);
        if sy <= CURVATURE_EPS * dot(&s, &s).sqrt() * dot(&y, &y).sqrt() || sy <= 0.0 {
            continue;
        }
        let rho = 1.0 / sy;
        let a = rho * dot(&s, &q);
        for (qi, yi) in q.iter_mut().zip(&y) {
            *qi -= a * yi;
        }
        alphas.push(a);
        used.push((s, y, rho));
    }
    let gamma = used
        .first()
        .map(|(s, y, _)| dot(s, y) / dot(y, y))
        .unwrap_or(1.0);
    let mut r: Vec<f64> = q.iter().map(|v| gamma * v).collect();
    for ((s, y, rho), a) in used.iter().zip(&alphas).rev() {
        let b = rho * dot(y, &r);
        for (ri, si) in r.iter_mut().zip(s) {
            *ri += si * (a - b);
        }
    }
    r.iter_mut().for_each(|v| *v = -*v);
    r
}

/// Minimizes `objective` over `bounds` starting from `x0` (clamped into the box).
///
/// The objective returns its value and gradient; it is only ever evaluated
/// at points inside the box.
pub fn minimize<F>(mut objective: F, bounds: &BoxBounds, x0: &[f64], config: &OptimizerConfig) -> Result<Minimum>
where
    F: FnMut(&[f64]) -> (f64, Vec<f64>),
{
    bounds.validate()?;
    config.validate()?;
    if x0.len() != bounds.dim() {
        return Err(invalid_arg(format!(
            "start point has dimension {} but box has {}",
            x0.len(),
            bounds.dim()
        )));
    }
    let n = x0.len();
    let mut x = x0.to_vec();
    bounds.project(&mut x);
    let (mut f, mut g) = evaluate(&mut objective, &x)?;
    let mut trace = vec![f];
    let mut history: VecDeque<(Vec<f64>, Vec<f64>)> = VecDeque::with_capacity(config.memory);

    for iter in 0..config.max_iters {
        if projected_gradient_norm(&x, &g, bounds) <= config.grad_tol {
            return Ok(Minimum { x, f, status: Status::Converged, iterations: iter, trace });
        }

        let free = free_mask(&x, &g, bounds);
        let mut direction = two_loop(&g, &free, &history);
        let steepest = |g: &[f64]| -> Vec<f64> {
            g.iter().zip(&free).map(|(gi, fr)| if *fr { -gi } else { 0.0 }).collect()
        };
        if dot(&direction, &g) >= 0.0 || direction.iter().any(|d| !d.is_finite()) {
            history.clear();
            direction = steepest(&g);
        }

        let mut accepted = None;
        for attempt in 0..2 {
            // first step without curvature information is scaled to a unit move
            let mut step = if history.is_empty() {
                let dmax = direction.iter().fold(0.0f64, |m, d| m.max(d.abs()));
                if dmax > 0.0 { (1.0 / dmax).min(1.0) } else { 1.0 }
            } else {
                1.0
            };
            for _ in 0..MAX_BACKTRACKS {
                let mut trial: Vec<f64> = x.iter().zip(&direction).map(|(xi, di)| xi + step * di).collect();
                bounds.project(&mut trial);
                let moved: Vec<f64> = trial.iter().zip(&x).map(|(a, b)| a - b).collect();
                let decrease = dot(&g, &moved);
                if decrease >= 0.0 {
                    step *= 0.5;
                    continue;
                }
                let (ft, gt) = evaluate(&mut objective, &trial)?;
                if ft <= f + ARMIJO_C1 * decrease {
                    accepted = Some((trial, ft, gt));
                    break;
                }
                step *= 0.5;
            }
            if accepted.is_some() || attempt == 1 || history.is_empty() {
                break;
            }
            history.clear();
            direction = steepest(&g);
        }

        let Some((x_new, f_new, g_new)) = accepted else {
            let status = if projected_gradient_norm(&x, &g, bounds) <= config.grad_tol {
                Status::Converged
            } else {
                Status::Degenerate
            };
            return Ok(Minimum { x, f, status, iterations: iter, trace });
        };

        let s: Vec<f64> = x_new.iter().zip(&x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = g_new.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        if sy > CURVATURE_EPS * dot(&s, &s).sqrt() * dot(&y, &y).sqrt() {
            if history.len() == config.memory {
                history.pop_front();
            }
            history.push_back((s, y));
        }

        let f_old = f;
        x = x_new;
        f = f_new;
        g = g_new;
        trace.push(f);

        if (f_old - f) <= config.f_tol * f_old.abs().max(f.abs()).max(1.0) {
            let status = if projected_gradient_norm(&x, &g, bounds) <= config.grad_tol {
                Status::Converged
            } else {
                Status::Stalled
            };
            return Ok(Minimum { x, f, status, iterations: iter + 1, trace });
        }
        debug_assert_eq!(x.len(), n);
    }
    let status = if projected_gradient_norm(&x, &g, bounds) <= config.grad_tol {
        Status::Converged
    } else {
        Status::MaxIters
    };
    Ok(Minimum { x, f, status, iterations: config.max_iters, trace })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MultistartConfig {
    pub n_starts: usize,
    /// Stratified candidates screened by objective value; the best
    /// `n_starts` become starting points. Values `<= n_starts` disable screening.
    pub n_candidates: usize,
}

impl Default for MultistartConfig {
    fn default() -> Self {
        Self { n_starts: 16, n_candidates: 256 }
    }
}

/// Latin-hypercube sample of `n` points inside `bounds`.
pub fn stratified_points(bounds: &BoxBounds, n: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = rng_for(seed, stream::MULTISTART, 0);
    let k = bounds.dim();
    let mut columns: Vec<Vec<f64>> = Vec::with_capacity(k);
    for _ in 0..k {
        let mut strata: Vec<usize> = (0..n).collect();
        // Fisher-Yates with the seeded stream
        for i in (1..n).rev() {
            let j = rng.random_range(0..=i);
            strata.swap(i, j);
        }
        columns.push(
            strata
                .into_iter()
                .map(|s| (s as f64 + rng.random::<f64>()) / n as f64)
                .collect(),
        );
    }
    (0..n)
        .map(|i| {
            let u: Vec<f64> = columns.iter().map(|c| c[i]).collect();
            bounds.from_unit(&u)
        })
        .collect()
}

/// Runs [`minimize`] from several stratified starts and keeps the best result.
///
/// Starts run in parallel; the winner is the lowest objective value with ties
/// going to the earliest start, so the result only depends on `seed`.
pub fn multistart_minimize<F>(
    objective: F,
    bounds: &BoxBounds,
    multistart: &MultistartConfig,
    seed: u64,
    config: &OptimizerConfig,
) -> Result<Minimum>
where
    F: Fn(&[f64]) -> (f64, Vec<f64>) + Sync,
{
    bounds.validate()?;
    if multistart.n_starts == 0 {
        return Err(invalid_arg("multistart needs at least one start"));
    }
    let starts = if multistart.n_candidates > multistart.n_starts {
        let candidates = stratified_points(bounds, multistart.n_candidates, seed);
        let mut scored: Vec<(usize, f64)> = candidates
            .iter()
            .enumerate()
            .map(|(i, c)| (i, objective(c).0))
            .map(|(i, v)| (i, if v.is_finite() { v } else { f64::INFINITY }))
            .collect();
        scored.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
        scored
            .iter()
            .take(multistart.n_starts)
            .map(|(i, _)| candidates[*i].clone())
            .collect()
    } else {
        stratified_points(bounds, multistart.n_starts, seed)
    };

    let results: Vec<Result<Minimum>> = starts
        .par_iter()
        .map(|x0| minimize(|x| objective(x), bounds, x0, config))
        .collect();

    let mut best: Option<Minimum> = None;
    let mut last_err = None;
    for r in results {
        match r {
            Ok(m) => {
                if best.as_ref().is_none_or(|b| m.f < b.f) {
                    best = Some(m);
                }
            }
            Err(e) => last_err = Some(e),
        }
    }
    match (best, last_err) {
        (Some(b), _) => Ok(b),
        (None, Some(e)) => Err(e),
        (None, None) => unreachable!("at least one start was run"),
    }
}
