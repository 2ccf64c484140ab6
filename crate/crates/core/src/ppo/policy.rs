//! Gaussian policy and value function on small tanh perceptrons.
//!
//! All weights live in one flat vector so the optimizer and the gradient
//! checks can treat them uniformly. Layout, in order:
//! policy `W1 b1 W2 b2 Wμ bμ log_std`, then value `V1 c1 V2 c2 Vo co`.
//! Matrices are row-major with one row per output unit.

use std::io::{Read, Write};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::env::{Action, Observation, Policy, OBS_DIM};
use crate::error::{Error, Result};

pub const ACT_DIM: usize = 3;
pub const LOG_STD_MIN: f64 = -5.0;
pub const LOG_STD_MAX: f64 = 2.0;
const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Layout {
    obs: usize,
    hidden: usize,
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
    wm: usize,
    bm: usize,
    log_std: usize,
    v1: usize,
    c1: usize,
    v2: usize,
    c2: usize,
    vo: usize,
    co: usize,
    len: usize,
}

impl Layout {
    fn new(obs: usize, hidden: usize) -> Self {
        let mut at = 0;
        let mut take = |n: usize| {
            let start = at;
            at += n;
            start
        };
        let w1 = take(hidden * obs);
        let b1 = take(hidden);
        let w2 = take(hidden * hidden);
        let b2 = take(hidden);
        let wm = take(ACT_DIM * hidden);
        let bm = take(ACT_DIM);
        let log_std = take(ACT_DIM);
        let v1 = take(hidden * obs);
        let c1 = take(hidden);
        let v2 = take(hidden * hidden);
        let c2 = take(hidden);
        let vo = take(hidden);
        let co = take(1);
        Self { obs, hidden, w1, b1, w2, b2, wm, bm, log_std, v1, c1, v2, c2, vo, co, len: at }
    }
}

/// Activations kept from a forward pass for backpropagation.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    input: Vec<f64>,
    ph1: Vec<f64>,
    ph2: Vec<f64>,
    vh1: Vec<f64>,
    vh2: Vec<f64>,
    pub mean: [f64; ACT_DIM],
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PolicyParams {
    layout: Layout,
    theta: Vec<f64>,
}

fn dense_tanh(w: &[f64], b: &[f64], x: &[f64], out: &mut [f64]) {
    let n_in = x.len();
    for (j, o) in out.iter_mut().enumerate() {
        let row = &w[j * n_in..(j + 1) * n_in];
        let z: f64 = b[j] + row.iter().zip(x).map(|(a, c)| a * c).sum::<f64>();
        *o = z.tanh();
    }
}

impl PolicyParams {
    /// Orthogonal-style scaled Gaussian initialization with small output layers.
    pub fn init(hidden: usize, init_log_std: f64, rng: &mut ChaCha8Rng) -> Self {
        Self::init_with_dims(OBS_DIM, hidden, init_log_std, rng)
    }

    pub(crate) fn init_with_dims(obs: usize, hidden: usize, init_log_std: f64, rng: &mut ChaCha8Rng) -> Self {
        let layout = Layout::new(obs, hidden);
        let mut theta = vec![0.0; layout.len];
        let mut fill = |start: usize, n: usize, fan_in: usize, gain: f64| {
            let scale = gain / (fan_in as f64).sqrt();
            for v in &mut theta[start..start + n] {
                let z: f64 = StandardNormal.sample(rng);
                *v = z * scale;
            }
        };
        fill(layout.w1, hidden * obs, obs, 1.0);
        fill(layout.w2, hidden * hidden, hidden, 1.0);
        fill(layout.wm, ACT_DIM * hidden, hidden, 0.01);
        fill(layout.v1, hidden * obs, obs, 1.0);
        fill(layout.v2, hidden * hidden, hidden, 1.0);
        fill(layout.vo, hidden, hidden, 1.0);
        for v in &mut theta[layout.log_std..layout.log_std + ACT_DIM] {
            *v = init_log_std.clamp(LOG_STD_MIN, LOG_STD_MAX);
        }
        Self { layout, theta }
    }

    pub fn hidden(&self) -> usize {
        self.layout.hidden
    }

    pub fn obs_dim(&self) -> usize {
        self.layout.obs
    }

    pub fn n_params(&self) -> usize {
        self.layout.len
    }

    pub fn theta(&self) -> &[f64] {
        &self.theta
    }

    pub fn theta_mut(&mut self) -> &mut [f64] {
        &mut self.theta
    }

    pub fn log_std(&self) -> &[f64] {
        &self.theta[self.layout.log_std..self.layout.log_std + ACT_DIM]
    }

    /// Index of the first log-std entry in the flat parameter vector.
    pub fn log_std_index(&self) -> usize {
        self.layout.log_std
    }

    pub fn is_finite(&self) -> bool {
        self.theta.iter().all(|v| v.is_finite())
    }

    /// Sets the output-layer bias of the action mean.
    pub fn set_action_bias(&mut self, bias: [f64; ACT_DIM]) {
        let s = self.layout.bm;
        self.theta[s..s + ACT_DIM].copy_from_slice(&bias);
    }

    /// Restores the log-std bounds after an update.
    pub fn clamp_log_std(&mut self) {
        let s = self.layout.log_std;
        for v in &mut self.theta[s..s + ACT_DIM] {
            *v = v.clamp(LOG_STD_MIN, LOG_STD_MAX);
        }
    }

    pub fn forward(&self, obs: &[f64]) -> ForwardCache {
        let l = &self.layout;
        let h = l.hidden;
        let t = &self.theta;
        let mut ph1 = vec![0.0; h];
        let mut ph2 = vec![0.0; h];
        dense_tanh(&t[l.w1..l.b1], &t[l.b1..l.w2], obs, &mut ph1);
        dense_tanh(&t[l.w2..l.b2], &t[l.b2..l.wm], &ph1, &mut ph2);
        let mut mean = [0.0; ACT_DIM];
        for (a, m) in mean.iter_mut().enumerate() {
            let row = &t[l.wm + a * h..l.wm + (a + 1) * h];
            *m = t[l.bm + a] + row.iter().zip(&ph2).map(|(w, x)| w * x).sum::<f64>();
        }
        let mut vh1 = vec![0.0; h];
        let mut vh2 = vec![0.0; h];
        dense_tanh(&t[l.v1..l.c1], &t[l.c1..l.v2], obs, &mut vh1);
        dense_tanh(&t[l.v2..l.c2], &t[l.c2..l.vo], &vh1, &mut vh2);
        let value = t[l.co] + t[l.vo..l.co].iter().zip(&vh2).map(|(w, x)| w * x).sum::<f64>();
        ForwardCache { input: obs.to_vec(), ph1, ph2, vh1, vh2, mean, value }
    }

    pub fn value(&self, obs: &[f64]) -> f64 {
        self.forward(obs).value
    }

    /// Log density of `action` under the Gaussian with the cached mean.
    pub fn log_prob(&self, cache: &ForwardCache, action: &[f64; ACT_DIM]) -> f64 {
        self.log_std()
            .iter()
            .zip(&cache.mean)
            .zip(action)
            .map(|((ls, m), a)| {
                let z = (a - m) / ls.exp();
                -0.5 * z * z - ls - HALF_LN_2PI
            })
            .sum()
    }

    /// Differential entropy of the action distribution.
    pub fn entropy(&self) -> f64 {
        self.log_std().iter().map(|ls| ls + 0.5 + HALF_LN_2PI).sum()
    }

    /// Samples a raw (unclamped) action; returns it with its log density and the value estimate.
    pub fn sample(&self, obs: &[f64], rng: &mut ChaCha8Rng) -> ([f64; ACT_DIM], f64, f64) {
        let cache = self.forward(obs);
        let mut action = [0.0; ACT_DIM];
        for (i, a) in action.iter_mut().enumerate() {
            let z: f64 = StandardNormal.sample(rng);
            *a = cache.mean[i] + self.log_std()[i].exp() * z;
        }
        let lp = self.log_prob(&cache, &action);
        (action, lp, cache.value)
    }

    /// Accumulates the gradient of a scalar loss into `grad`, given the loss
    /// derivatives with respect to the action means, the log-stds and the value.
    pub(crate) fn backward(
        &self,
        cache: &ForwardCache,
        d_mean: &[f64; ACT_DIM],
        d_log_std: &[f64; ACT_DIM],
        d_value: f64,
        grad: &mut [f64],
    ) {
        let l = &self.layout;
        let h = l.hidden;
        let n_in = l.obs;
        let t = &self.theta;

        for a in 0..ACT_DIM {
            grad[l.log_std + a] += d_log_std[a];
        }

        // policy head
        let mut d_ph2 = vec![0.0; h];
        for a in 0..ACT_DIM {
            grad[l.bm + a] += d_mean[a];
            for j in 0..h {
                grad[l.wm + a * h + j] += d_mean[a] * cache.ph2[j];
                d_ph2[j] += d_mean[a] * t[l.wm + a * h + j];
            }
        }
        backprop_two_tanh(
            t, grad, &cache.input, &cache.ph1, &cache.ph2, &mut d_ph2, (l.w1, l.b1, l.w2, l.b2), h, n_in,
        );

        // value head
        let mut d_vh2 = vec![0.0; h];
        grad[l.co] += d_value;
        for j in 0..h {
            grad[l.vo + j] += d_value * cache.vh2[j];
            d_vh2[j] = d_value * t[l.vo + j];
        }
        backprop_two_tanh(
            t, grad, &cache.input, &cache.vh1, &cache.vh2, &mut d_vh2, (l.v1, l.c1, l.v2, l.c2), h, n_in,
        );
    }

    const MAGIC: &'static [u8; 4] = b"CBOP";
    const VERSION: u32 = 1;

    /// Writes a versioned little-endian checkpoint with an embedded config digest.
    pub fn write_checkpoint<W: Write>(&self, mut out: W, digest: &str) -> Result<()> {
        out.write_all(Self::MAGIC)?;
        out.write_all(&Self::VERSION.to_le_bytes())?;
        let d = digest.as_bytes();
        out.write_all(&(d.len() as u32).to_le_bytes())?;
        out.write_all(d)?;
        out.write_all(&(self.layout.obs as u32).to_le_bytes())?;
        out.write_all(&(self.layout.hidden as u32).to_le_bytes())?;
        out.write_all(&(self.theta.len() as u64).to_le_bytes())?;
        for v in &self.theta {
            out.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    /// Reads a checkpoint; returns the parameters and the stored digest.
    pub fn read_checkpoint<R: Read>(mut input: R) -> Result<(Self, String)> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        let mut magic = [0u8; 4];
        input.read_exact(&mut magic)?;
        if &magic != Self::MAGIC {
            return Err(bad("not a policy checkpoint"));
        }
        let mut u32buf = [0u8; 4];
        input.read_exact(&mut u32buf)?;
        let version = u32::from_le_bytes(u32buf);
        if version != Self::VERSION {
            return Err(Error::Checkpoint(format!("unsupported checkpoint version {version}")));
        }
        input.read_exact(&mut u32buf)?;
        let dlen = u32::from_le_bytes(u32buf) as usize;
        if dlen > 4096 {
            return Err(bad("digest too long"));
        }
        let mut d = vec![0u8; dlen];
        input.read_exact(&mut d)?;
        let digest = String::from_utf8(d).map_err(|_| bad("digest is not UTF-8"))?;
        input.read_exact(&mut u32buf)?;
        let obs = u32::from_le_bytes(u32buf) as usize;
        input.read_exact(&mut u32buf)?;
        let hidden = u32::from_le_bytes(u32buf) as usize;
        let mut u64buf = [0u8; 8];
        input.read_exact(&mut u64buf)?;
        let n = u64::from_le_bytes(u64buf) as usize;
        let layout = Layout::new(obs, hidden);
        if n != layout.len {
            return Err(Error::Checkpoint(format!(
                "parameter count {n} does not match layout ({obs} inputs, {hidden} hidden)"
            )));
        }
        let mut theta = Vec::with_capacity(n);
        for _ in 0..n {
            input.read_exact(&mut u64buf)?;
            theta.push(f64::from_le_bytes(u64buf));
        }
        Ok((Self { layout, theta }, digest))
    }
}

#[allow(clippy::too_many_arguments)]
fn backprop_two_tanh(
    t: &[f64],
    grad: &mut [f64],
    input: &[f64],
    h1: &[f64],
    h2: &[f64],
    d_h2: &mut [f64],
    (w1, b1, w2, b2): (usize, usize, usize, usize),
    h: usize,
    n_in: usize,
) {
    for j in 0..h {
        d_h2[j] *= 1.0 - h2[j] * h2[j];
    }
    let mut d_h1 = vec![0.0; h];
    for j in 0..h {
        let dz = d_h2[j];
        grad[b2 + j] += dz;
        let row = w2 + j * h;
        for i in 0..h {
            grad[row + i] += dz * h1[i];
            d_h1[i] += dz * t[row + i];
        }
    }
    for j in 0..h {
        let dz = d_h1[j] * (1.0 - h1[j] * h1[j]);
        grad[b1 + j] += dz;
        let row = w1 + j * n_in;
        for i in 0..n_in {
            grad[row + i] += dz * input[i];
        }
    }
}

/// Acts with the mean of the action distribution.
impl Policy for PolicyParams {
    fn act(&self, obs: &Observation, _rng: &mut ChaCha8Rng) -> Action {
        let m = self.forward(obs.as_slice()).mean;
        Action::new(m[0], m[1], m[2])
    }
}

/// Samples from the action distribution.
pub struct StochasticPolicy<'a>(pub &'a PolicyParams);

impl Policy for StochasticPolicy<'_> {
    fn act(&self, obs: &Observation, rng: &mut ChaCha8Rng) -> Action {
        let (a, _, _) = self.0.sample(obs.as_slice(), rng);
        Action::new(a[0], a[1], a[2])
    }
}

/// Uniformly random actions, used as an untrained baseline.
pub struct RandomPolicy;

impl Policy for RandomPolicy {
    fn act(&self, _obs: &Observation, rng: &mut ChaCha8Rng) -> Action {
        Action::new(rng.random_range(-1.0..=1.0), rng.random(), rng.random())
    }
}
