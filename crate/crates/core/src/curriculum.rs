//! Curriculum schedules: ordered changepoints mapping training epochs to
//! environment parameters.
//!
//! A search vector `x` holds, for each changepoint, the last epoch of the
//! preceding segment (the inclusive range ends as tabulated, e.g. "0-160,
//! 161-417, …"). The changepoint itself is `round(x_i) + 1`, so segment `i`
//! covers the half-open epoch range `[t_i, t_{i+1})`.

use serde::{Deserialize, Serialize};

use crate::error::{invalid_arg, Error, Result};

/// Environment parameters: turn rate `kappa` and per-tile obstacle probability `p`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnvParams {
    pub kappa: f64,
    pub p: f64,
}

impl EnvParams {
    pub fn new(kappa: f64, p: f64) -> Result<Self> {
        let e = Self { kappa, p };
        e.validate()?;
        Ok(e)
    }

    /// The default training setting `[0.31, 0.05]`.
    pub const DEFAULT: EnvParams = EnvParams { kappa: 0.31, p: 0.05 };

    pub fn validate(&self) -> Result<()> {
        if !(self.kappa > 0.0 && self.kappa.is_finite()) {
            return Err(invalid_arg(format!("turn rate must be positive, got {}", self.kappa)));
        }
        if !(0.0..=1.0).contains(&self.p) {
            return Err(invalid_arg(format!("obstacle probability must be in [0, 1], got {}", self.p)));
        }
        Ok(())
    }
}

impl Default for EnvParams {
    fn default() -> Self {
        Self::DEFAULT
    }
}

/// Which environment variables the ladder and evaluation sets vary.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum EnvMode {
    /// Both turn rate and obstacle probability.
    #[default]
    Kp,
    /// Turn rate only, obstacles disabled.
    Kappa,
    /// Obstacle probability only, turn rate fixed at 0.31.
    P,
}

impl std::str::FromStr for EnvMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "kp" => Ok(EnvMode::Kp),
            "kappa" => Ok(EnvMode::Kappa),
            "p" => Ok(EnvMode::P),
            other => Err(invalid_arg(format!("unknown env mode '{other}' (expected kp, kappa or p)"))),
        }
    }
}

impl std::fmt::Display for EnvMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            EnvMode::Kp => "kp",
            EnvMode::Kappa => "kappa",
            EnvMode::P => "p",
        })
    }
}

/// Turn rates of increasing difficulty.
pub const KAPPA_LEVELS: [f64; 5] = [0.31, 0.41, 0.51, 0.61, 0.71];
/// Obstacle probabilities of increasing difficulty.
pub const P_LEVELS: [f64; 5] = [0.05, 0.07, 0.09, 0.11, 0.13];

/// Environment parameters for difficulty level `i` (0-based) under `mode`.
pub fn level_params(mode: EnvMode, i: usize) -> EnvParams {
    match mode {
        EnvMode::Kp => EnvParams { kappa: KAPPA_LEVELS[i], p: P_LEVELS[i] },
        EnvMode::Kappa => EnvParams { kappa: KAPPA_LEVELS[i], p: 0.0 },
        EnvMode::P => EnvParams { kappa: KAPPA_LEVELS[0], p: P_LEVELS[i] },
    }
}

/// Easy-to-hard sequence of environment settings whose switch times are searched.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PsiLadder(Vec<EnvParams>);

impl PsiLadder {
    pub fn new(steps: Vec<EnvParams>) -> Result<Self> {
        if steps.len() < 2 {
            return Err(invalid_arg("a ladder needs at least two settings"));
        }
        for s in &steps {
            s.validate()?;
        }
        for w in steps.windows(2) {
            if w[1].kappa < w[0].kappa || w[1].p < w[0].p {
                return Err(invalid_arg(format!(
                    "ladder difficulty must be non-decreasing: {:?} follows {:?}",
                    w[1], w[0]
                )));
            }
        }
        Ok(Self(steps))
    }

    /// The four-step ladder `[0.31,0.05] → [0.41,0.07] → [0.51,0.09] → [0.61,0.11]`
    /// (or its one-variable analogue).
    pub fn standard(mode: EnvMode) -> Self {
        Self((0..4).map(|i| level_params(mode, i)).collect())
    }

    pub fn steps(&self) -> &[EnvParams] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Number of changepoints a curriculum over this ladder has.
    pub fn n_changepoints(&self) -> usize {
        self.0.len() - 1
    }
}

/// One serialized schedule entry.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub start_epoch: u32,
    pub kappa: f64,
    pub p: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "CurriculumDoc", into = "CurriculumDoc")]
pub struct Curriculum {
    changepoints: Vec<u32>,
    segments: Vec<EnvParams>,
    max_epoch: u32,
}

#[derive(Serialize, Deserialize)]
struct CurriculumDoc {
    max_epoch: u32,
    segments: Vec<Segment>,
}

impl TryFrom<CurriculumDoc> for Curriculum {
    type Error = Error;
    fn try_from(doc: CurriculumDoc) -> Result<Self> {
        let first = doc
            .segments
            .first()
            .ok_or_else(|| Error::InvalidCurriculum("no segments".into()))?;
        if first.start_epoch != 0 {
            return Err(Error::InvalidCurriculum(format!(
                "first segment must start at epoch 0, got {}",
                first.start_epoch
            )));
        }
        let changepoints = doc.segments.iter().skip(1).map(|s| s.start_epoch).collect();
        let segments = doc
            .segments
            .iter()
            .map(|s| EnvParams::new(s.kappa, s.p))
            .collect::<Result<_>>()?;
        Curriculum::new(changepoints, segments, doc.max_epoch)
    }
}

impl From<Curriculum> for CurriculumDoc {
    fn from(c: Curriculum) -> Self {
        CurriculumDoc {
            max_epoch: c.max_epoch,
            segments: c.schedule(),
        }
    }
}

impl Curriculum {
    pub fn new(changepoints: Vec<u32>, segments: Vec<EnvParams>, max_epoch: u32) -> Result<Self> {
        if segments.len() != changepoints.len() + 1 {
            return Err(Error::InvalidCurriculum(format!(
                "{} segments for {} changepoints",
                segments.len(),
                changepoints.len()
            )));
        }
        let mut prev = 0u32;
        for &t in &changepoints {
            if t <= prev {
                return Err(Error::InvalidCurriculum(format!(
                    "changepoints must be strictly ascending and positive: {changepoints:?}"
                )));
            }
            prev = t;
        }
        if prev >= max_epoch && !changepoints.is_empty() {
            return Err(Error::InvalidCurriculum(format!(
                "changepoint {prev} is not below max epoch {max_epoch}"
            )));
        }
        if max_epoch == 0 {
            return Err(Error::InvalidCurriculum("max epoch must be positive".into()));
        }
        Ok(Self { changepoints, segments, max_epoch })
    }

    /// A schedule that stays at `params` for the whole run.
    pub fn constant(params: EnvParams, max_epoch: u32) -> Result<Self> {
        Self::new(vec![], vec![params], max_epoch)
    }

    /// Builds a curriculum from a real-valued search vector of inclusive
    /// segment end epochs; see the module docs for the convention.
    pub fn from_changepoints(x: &[f64], ladder: &PsiLadder, max_epoch: u32) -> Result<Self> {
        if x.len() != ladder.n_changepoints() {
            return Err(invalid_arg(format!(
                "ladder of {} settings needs {} changepoints, got {}",
                ladder.len(),
                ladder.n_changepoints(),
                x.len()
            )));
        }
        let mut cps = Vec::with_capacity(x.len());
        for &v in x {
            if !v.is_finite() {
                return Err(Error::InvalidCurriculum(format!("non-finite changepoint {v}")));
            }
            let t = v.round() + 1.0;
            if t < 1.0 || t >= max_epoch as f64 {
                return Err(Error::InvalidCurriculum(format!(
                    "changepoint {t} outside (0, {max_epoch})"
                )));
            }
            cps.push(t as u32);
        }
        Self::new(cps, ladder.steps().to_vec(), max_epoch)
    }

    /// Inverse of [`Curriculum::from_changepoints`]: the inclusive end epoch of
    /// every segment but the last.
    pub fn boundary_vector(&self) -> Vec<f64> {
        self.changepoints.iter().map(|t| (*t - 1) as f64).collect()
    }

    pub fn changepoints(&self) -> &[u32] {
        &self.changepoints
    }

    pub fn segments(&self) -> &[EnvParams] {
        &self.segments
    }

    pub fn max_epoch(&self) -> u32 {
        self.max_epoch
    }

    /// Environment parameters in effect at `epoch`.
    pub fn param_at(&self, epoch: u32) -> Result<EnvParams> {
        if epoch >= self.max_epoch {
            return Err(invalid_arg(format!("epoch {epoch} outside [0, {})", self.max_epoch)));
        }
        let idx = self.changepoints.partition_point(|t| *t <= epoch);
        Ok(self.segments[idx])
    }

    pub fn schedule(&self) -> Vec<Segment> {
        std::iter::once(0)
            .chain(self.changepoints.iter().copied())
            .zip(&self.segments)
            .map(|(start_epoch, s)| Segment { start_epoch, kappa: s.kappa, p: s.p })
            .collect()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ladder() -> PsiLadder {
        PsiLadder::standard(EnvMode::Kp)
    }

    #[test]
    fn bo_column_of_table() {
        let c = Curriculum::from_changepoints(&[160.0, 417.0, 736.0], &ladder(), 1000).unwrap();
        assert_eq!(c.changepoints(), &[161, 418, 737]);
        let starts: Vec<u32> = c.schedule().iter().map(|s| s.start_epoch).collect();
        assert_eq!(starts, vec![0, 161, 418, 737]);
    }

    #[test]
    fn manual_column_of_table() {
        let c = Curriculum::from_changepoints(&[197.0, 395.0, 774.0], &ladder(), 1000).unwrap();
        assert_eq!(c.changepoints(), &[198, 396, 775]);
    }

    #[test]
    fn unordered_changepoints_rejected() {
        let r = Curriculum::from_changepoints(&[400.0, 300.0, 800.0], &ladder(), 1000);
        assert!(matches!(r, Err(Error::InvalidCurriculum(_))));
        let r = Curriculum::from_changepoints(&[100.0, 300.0, 999.0], &ladder(), 1000);
        assert!(matches!(r, Err(Error::InvalidCurriculum(_))));
        let r = Curriculum::from_changepoints(&[100.0, 100.4, 500.0], &ladder(), 1000);
        assert!(matches!(r, Err(Error::InvalidCurriculum(_))));
    }

    #[test]
    fn wrong_dimension_rejected() {
        assert!(matches!(
            Curriculum::from_changepoints(&[100.0, 300.0], &ladder(), 1000),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn boundary_epochs() {
        let c = Curriculum::from_changepoints(&[160.0, 417.0, 736.0], &ladder(), 1000).unwrap();
        assert_eq!(c.param_at(0).unwrap(), EnvParams { kappa: 0.31, p: 0.05 });
        assert_eq!(c.param_at(160).unwrap(), EnvParams { kappa: 0.31, p: 0.05 });
        assert_eq!(c.param_at(161).unwrap(), EnvParams { kappa: 0.41, p: 0.07 });
        assert_eq!(c.param_at(999).unwrap(), EnvParams { kappa: 0.61, p: 0.11 });
        assert!(c.param_at(1000).is_err());
    }

    #[test]
    fn ladder_must_be_monotone() {
        let r = PsiLadder::new(vec![EnvParams::new(0.5, 0.1).unwrap(), EnvParams::new(0.4, 0.1).unwrap()]);
        assert!(r.is_err());
    }

    #[test]
    fn one_variable_ladders() {
        let k = PsiLadder::standard(EnvMode::Kappa);
        assert!(k.steps().iter().all(|s| s.p == 0.0));
        let p = PsiLadder::standard(EnvMode::P);
        assert!(p.steps().iter().all(|s| s.kappa == 0.31));
        assert_eq!(p.steps()[3].p, 0.11);
    }

    #[test]
    fn json_round_trip() {
        let c = Curriculum::from_changepoints(&[197.0, 395.0, 774.0], &ladder(), 1000).unwrap();
        let back = Curriculum::from_json(&c.to_json().unwrap()).unwrap();
        assert_eq!(back, c);
        assert!(Curriculum::from_json(r#"{"max_epoch":10,"segments":[{"start_epoch":3,"kappa":0.3,"p":0.0}]}"#).is_err());
    }

    #[test]
    fn invalid_env_params() {
        assert!(EnvParams::new(0.0, 0.1).is_err());
        assert!(EnvParams::new(0.3, 1.5).is_err());
        assert!(EnvParams::new(0.3, -0.1).is_err());
    }
}
