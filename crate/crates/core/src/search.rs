//! Bayesian-optimization curriculum search.
//!
//! Warm-up trials from a fixed stratified design, then repeated
//! {refit GP on all trials, maximize UCB, evaluate, append}.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::boxopt::{multistart_minimize, BoxBounds, MultistartConfig, OptimizerConfig};
use crate::curriculum::{Curriculum, EnvMode, PsiLadder};
use crate::digest::config_digest;
use crate::error::{invalid_arg, Error, Result};
use crate::gp::{fit, GpModel, KernelParams};
use crate::ppo::{TrainingCurve, DEFAULT_FLOOR};
use crate::seed::{derive_seed, stream};

/// Points per axis of the fallback acquisition grid.
pub const GRID_POINTS: usize = 21;
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SearchConfig {
    pub bounds: BoxBounds,
    pub lambda_ucb: f64,
    pub n_warmup: usize,
    pub n_iterations: usize,
    pub kernel: KernelParams,
    /// Constant GP prior mean in reward units; absent means the sample mean.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prior_mean: Option<f64>,
    pub ladder: PsiLadder,
    pub max_epoch: u32,
    pub multistart: MultistartConfig,
    pub optimizer: OptimizerConfig,
    pub master_seed: u64,
    /// Objective value recorded for invalid curricula.
    pub floor: f64,
}

impl SearchConfig {
    pub fn paper() -> Self {
        Self {
            bounds: BoxBounds::paper(),
            lambda_ucb: 1.9,
            n_warmup: 5,
            n_iterations: 14,
            kernel: KernelParams::paper(),
            prior_mean: None,
            ladder: PsiLadder::standard(EnvMode::Kp),
            max_epoch: 1000,
            multistart: MultistartConfig::default(),
            optimizer: OptimizerConfig::default(),
            master_seed: 0,
            floor: DEFAULT_FLOOR,
        }
    }

    /// Epoch box and length scales shrunk by `factor` for a `max_epoch`-epoch run.
    pub fn scaled(factor: f64, max_epoch: u32) -> Self {
        let p = Self::paper();
        let mut kernel = p.kernel.clone();
        kernel.length_scales.iter_mut().for_each(|l| *l *= factor);
        Self { bounds: p.bounds.scaled(factor), kernel, max_epoch, ..p }
    }

    pub fn validate(&self) -> Result<()> {
        self.bounds.validate()?;
        self.kernel.validate()?;
        self.optimizer.validate()?;
        if self.kernel.dim() != self.bounds.dim() {
            return Err(invalid_arg("kernel and bounds dimensions differ"));
        }
        if self.ladder.n_changepoints() != self.bounds.dim() {
            return Err(invalid_arg(format!(
                "ladder has {} changepoints but the box has {} dimensions",
                self.ladder.n_changepoints(),
                self.bounds.dim()
            )));
        }
        if self.n_warmup == 0 {
            return Err(invalid_arg("n_warmup must be at least 1"));
        }
        if !(self.lambda_ucb >= 0.0 && self.lambda_ucb.is_finite()) {
            return Err(invalid_arg(format!("lambda_ucb must be non-negative, got {}", self.lambda_ucb)));
        }
        if !self.floor.is_finite() {
            return Err(invalid_arg("floor must be finite"));
        }
        if self.prior_mean.is_some_and(|m| !m.is_finite()) {
            return Err(invalid_arg("prior_mean must be finite"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Warmup,
    Bo,
}

impl std::fmt::Display for Phase {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Phase::Warmup => "warmup",
            Phase::Bo => "bo",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub index: usize,
    /// Search vector before rounding.
    pub x: Vec<f64>,
    /// Absent when `x` did not yield a valid curriculum.
    pub curriculum: Option<Curriculum>,
    pub y: f64,
    pub curve: Option<TrainingCurve>,
    pub phase: Phase,
    /// The acquisition maximizer failed and the grid fallback was used.
    pub fallback: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchResult {
    pub trials: Vec<TrialRecord>,
    pub best_by_final: usize,
    pub best_by_curve: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SelectMode {
    Final,
    Curve,
}

/// What the objective reports for one trial.
#[derive(Debug, Clone, PartialEq)]
pub struct ObjectiveOutcome {
    pub y: f64,
    pub curve: Option<TrainingCurve>,
}

impl ObjectiveOutcome {
    pub fn value(y: f64) -> Self {
        Self { y, curve: None }
    }
}

/// Arguments handed to the objective.
#[derive(Debug, Clone, Copy)]
pub struct TrialInput<'a> {
    pub index: usize,
    pub x: &'a [f64],
    pub curriculum: &'a Curriculum,
}

/// Center first, then 25%/75% corners (even parity first, which for three
/// dimensions is a four-run orthogonal array), then odd parity, then
/// corners on successively tighter levels.
pub fn warmup_design(bounds: &BoxBounds, n: usize) -> Vec<Vec<f64>> {
    let k = bounds.dim();
    let mut unit: Vec<Vec<f64>> = Vec::with_capacity(n);
    if n == 0 {
        return unit;
    }
    unit.push(vec![0.5; k]);
    let corners: Vec<u64> = {
        let all: Vec<u64> = (0..1u64 << k).collect();
        let even = all.iter().copied().filter(|m| m.count_ones() % 2 == 0);
        let odd = all.iter().copied().filter(|m| m.count_ones() % 2 == 1);
        even.chain(odd).collect()
    };
    let mut half_width = 0.25;
    'rounds: while unit.len() < n {
        for &mask in &corners {
            if unit.len() == n {
                break 'rounds;
            }
            let u = (0..k)
                .map(|d| if (mask >> (k - 1 - d)) & 1 == 1 { 0.5 + half_width } else { 0.5 - half_width })
                .collect();
            unit.push(u);
        }
        half_width /= 2.0;
    }
    unit.iter().map(|u| bounds.from_unit(u)).collect()
}

/// `μ(x) + λσ(x)` in reward units.
pub fn ucb(model: &GpModel, x: &[f64], lambda: f64) -> Result<f64> {
    let p = model.posterior(x)?;
    Ok(p.mean + lambda * p.std)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Proposal {
    pub x: Vec<f64>,
    pub acquisition: f64,
    pub fallback: bool,
}

/// Best point of a regular grid with `points` per axis.
pub fn grid_maximize(model: &GpModel, bounds: &BoxBounds, lambda: f64, points: usize) -> Result<Proposal> {
    let k = bounds.dim();
    let points = points.max(2);
    let total = points.pow(k as u32);
    let mut best: Option<(Vec<f64>, f64)> = None;
    let mut u = vec![0.0; k];
    for flat in 0..total {
        let mut rem = flat;
        for d in (0..k).rev() {
            u[d] = (rem % points) as f64 / (points - 1) as f64;
            rem /= points;
        }
        let x = bounds.from_unit(&u);
        let a = ucb(model, &x, lambda)?;
        if best.as_ref().is_none_or(|(_, b)| a > *b) {
            best = Some((x, a));
        }
    }
    let (x, acquisition) = best.expect("grid is non-empty");
    Ok(Proposal { x, acquisition, fallback: false })
}

/// Maximizes UCB over the box by multistart quasi-Newton on `-UCB`.
/// Falls back to the grid maximum if every start fails.
pub fn propose_next(model: &GpModel, config: &SearchConfig, seed: u64) -> Result<Proposal> {
    let lambda = config.lambda_ucb;
    let neg_ucb = |x: &[f64]| -> (f64, Vec<f64>) {
        match model.posterior_gradient(x) {
            Ok(pg) => (
                -(pg.mean + lambda * pg.std),
                pg.dmean.iter().zip(&pg.dstd).map(|(m, s)| -(m + lambda * s)).collect(),
            ),
            Err(_) => (f64::NAN, vec![f64::NAN; x.len()]),
        }
    };
    match multistart_minimize(neg_ucb, &config.bounds, &config.multistart, seed, &config.optimizer) {
        Ok(m) => {
            let mut x = m.x;
            config.bounds.project(&mut x);
            let acquisition = ucb(model, &x, lambda)?;
            Ok(Proposal { x, acquisition, fallback: false })
        }
        Err(e) => {
            log::warn!("acquisition optimizer failed ({e}); using grid fallback");
            let mut p = grid_maximize(model, &config.bounds, lambda, GRID_POINTS)?;
            p.fallback = true;
            Ok(p)
        }
    }
}

/// Index of the selected trial; ties go to the lowest index.
pub fn select_best_trial(trials: &[TrialRecord], mode: SelectMode) -> Result<&TrialRecord> {
    let stat = |t: &TrialRecord| match mode {
        SelectMode::Final => t.y,
        SelectMode::Curve => t.curve.as_ref().and_then(|c| c.peak_eval()).unwrap_or(t.y),
    };
    let mut best: Option<&TrialRecord> = None;
    for t in trials {
        if best.is_none_or(|b| stat(t) > stat(b)) {
            best = Some(t);
        }
    }
    best.ok_or_else(|| invalid_arg("cannot select from an empty trial list"))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SearchCheckpoint {
    pub version: u32,
    pub config_digest: String,
    pub next_index: usize,
    pub trials: Vec<TrialRecord>,
}

impl SearchCheckpoint {
    pub fn load(path: &Path) -> Result<Self> {
        let cp: Self = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        if cp.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported search checkpoint version {}", cp.version)));
        }
        if cp.next_index != cp.trials.len() {
            return Err(Error::Checkpoint("trial count does not match next index".into()));
        }
        Ok(cp)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, serde_json::to_string_pretty(self)?)?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    }
}

/// Runs the full search. See [`run_search_with_checkpoint`] for resumable runs.
pub fn run_search<F>(config: &SearchConfig, objective: F) -> Result<SearchResult>
where
    F: FnMut(&TrialInput) -> Result<ObjectiveOutcome>,
{
    run_search_with_checkpoint(config, objective, None)
}

/// Like [`run_search`], persisting every trial to `checkpoint` and resuming
/// from it when it already exists for the same config.
pub fn run_search_with_checkpoint<F>(
    config: &SearchConfig,
    mut objective: F,
    checkpoint: Option<&Path>,
) -> Result<SearchResult>
where
    F: FnMut(&TrialInput) -> Result<ObjectiveOutcome>,
{
    config.validate()?;
    let digest = config_digest(config)?;
    let mut trials: Vec<TrialRecord> = Vec::new();
    if let Some(path) = checkpoint.filter(|p| p.exists()) {
        let cp = SearchCheckpoint::load(path)?;
        if cp.config_digest != digest {
            return Err(Error::Checkpoint(format!(
                "checkpoint {} was written for a different search config",
                path.display()
            )));
        }
        trials = cp.trials;
        log::info!("resuming search at trial {}", trials.len());
    }

    let total = config.n_warmup + config.n_iterations;
    let design = warmup_design(&config.bounds, config.n_warmup);
    while trials.len() < total {
        let index = trials.len();
        let (x, phase, fallback) = if index < config.n_warmup {
            (design[index].clone(), Phase::Warmup, false)
        } else {
            let xs: Vec<Vec<f64>> = trials.iter().map(|t| t.x.clone()).collect();
            let ys: Vec<f64> = trials.iter().map(|t| t.y).collect();
            let model = fit(&xs, &ys, &config.kernel, config.prior_mean).map_err(|e| {
                Error::NumericalFailure(format!("GP fit failed after {index} trials: {e}"))
            })?;
            let p = propose_next(&model, config, derive_seed(config.master_seed, stream::SEARCH, index as u64))?;
            (p.x, Phase::Bo, p.fallback)
        };

        let record = match Curriculum::from_changepoints(&x, &config.ladder, config.max_epoch) {
            Ok(curriculum) => {
                let out = objective(&TrialInput { index, x: &x, curriculum: &curriculum })?;
                let y = if out.y.is_finite() {
                    out.y
                } else {
                    log::warn!("trial {index} returned non-finite objective; recording floor");
                    config.floor
                };
                TrialRecord { index, x, curriculum: Some(curriculum), y, curve: out.curve, phase, fallback }
            }
            Err(Error::InvalidCurriculum(msg)) => {
                log::warn!("trial {index}: invalid curriculum ({msg}); recording floor");
                TrialRecord { index, x, curriculum: None, y: config.floor, curve: None, phase, fallback }
            }
            Err(e) => return Err(e),
        };
        log::info!("trial {index} ({phase}) x={:?} y={:.3}", record.x, record.y);
        trials.push(record);

        if let Some(path) = checkpoint {
            SearchCheckpoint {
                version: CHECKPOINT_VERSION,
                config_digest: digest.clone(),
                next_index: trials.len(),
                trials: trials.clone(),
            }
            .save(path)?;
        }
    }

    let best_by_final = select_best_trial(&trials, SelectMode::Final)?.index;
    let best_by_curve = select_best_trial(&trials, SelectMode::Curve)?.index;
    Ok(SearchResult { trials, best_by_final, best_by_curve })
}

#[derive(Serialize)]
struct ReportRow {
    trial: usize,
    x: String,
    y: f64,
    phase: Phase,
}

/// `trial,x,y,phase` with the coordinates of `x` joined by `;`.
pub fn write_report_csv<W: std::io::Write>(trials: &[TrialRecord], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for t in trials {
        let x = t.x.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(";");
        w.serialize(ReportRow { trial: t.index, x, y: t.y, phase: t.phase })?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ppo::EvalRecord;

    fn trial(index: usize, y: f64, peak: Option<f64>) -> TrialRecord {
        TrialRecord {
            index,
            x: vec![200.0, 390.0, 780.0],
            curriculum: None,
            y,
            curve: peak.map(|p| TrainingCurve {
                evals: vec![EvalRecord { epoch: 0, mean_reward: p, std_reward: 0.0 }],
                ..Default::default()
            }),
            phase: Phase::Bo,
            fallback: false,
        }
    }

    #[test]
    fn warmup_shapes() {
        let b = BoxBounds::paper();
        assert_eq!(warmup_design(&b, 1), vec![vec![200.0, 390.0, 780.0]]);
        let d = warmup_design(&b, 5);
        assert_eq!(d[0], vec![200.0, 390.0, 780.0]);
        assert_eq!(d[1], vec![175.0, 360.0, 755.0]);
        assert_eq!(d[2], vec![175.0, 420.0, 805.0]);
        assert_eq!(d[3], vec![225.0, 360.0, 805.0]);
        assert_eq!(d[4], vec![225.0, 420.0, 755.0]);
        let big = warmup_design(&b, 20);
        assert_eq!(big.len(), 20);
        for (i, p) in big.iter().enumerate() {
            assert!(b.contains(p));
            for q in &big[..i] {
                assert_ne!(p, q);
            }
        }
    }

    #[test]
    fn selection_modes_and_ties() {
        let t = vec![trial(0, 3.0, None), trial(1, 7.0, None), trial(2, 5.0, None)];
        assert_eq!(select_best_trial(&t, SelectMode::Final).unwrap().index, 1);
        let t = vec![trial(0, 5.0, Some(9.0)), trial(1, 6.0, Some(6.0))];
        assert_eq!(select_best_trial(&t, SelectMode::Curve).unwrap().index, 0);
        assert_eq!(select_best_trial(&t, SelectMode::Final).unwrap().index, 1);
        let t = vec![trial(0, 2.0, None), trial(1, 2.0, None)];
        assert_eq!(select_best_trial(&t, SelectMode::Final).unwrap().index, 0);
        assert!(select_best_trial(&[], SelectMode::Final).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(SearchConfig::paper().validate().is_ok());
        let mut c = SearchConfig::paper();
        c.n_warmup = 0;
        assert!(c.validate().is_err());
        let mut c = SearchConfig::paper();
        c.lambda_ucb = -0.1;
        assert!(c.validate().is_err());
        let s = SearchConfig::scaled(0.12, 120);
        assert!(s.validate().is_ok());
        assert!((s.bounds.lower[0] - 18.0).abs() < 1e-12);
        assert!((s.kernel.length_scales[1] - 3.18).abs() < 1e-12);
    }

    #[test]
    fn zero_iterations_returns_best_warmup() {
        let mut c = SearchConfig::paper();
        c.n_iterations = 0;
        let r = run_search(&c, |t| Ok(ObjectiveOutcome::value(-t.x[0]))).unwrap();
        assert_eq!(r.trials.len(), 5);
        assert!(r.trials.iter().all(|t| t.phase == Phase::Warmup));
        assert_eq!(r.trials[r.best_by_final].x[0], 175.0);
        assert_eq!(r.best_by_final, 1);
    }

    #[test]
    fn report_csv() {
        let mut buf = Vec::new();
        write_report_csv(&[trial(0, 1.5, None)], &mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "trial,x,y,phase\n0,200;390;780,1.5,bo\n");
    }
}
