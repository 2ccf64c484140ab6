//! Run configuration: profile defaults, an optional TOML file deep-merged on
//! top, then command-line overrides.

use std::path::PathBuf;

use anyhow::{anyhow, bail, Context, Result};
use clap::ValueEnum;
use curriculum_bo::curriculum::EnvMode;
use curriculum_bo::pipeline::{ExperimentConfig, Profile};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    TrainDefault,
    TrainManual,
    SearchBo,
    Evaluate,
    Sweep,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum, Default)]
#[serde(rename_all = "lowercase")]
pub enum TestSet {
    Easy,
    #[default]
    Hard,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSection {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mode: Option<Mode>,
    pub profile: Profile,
    pub env_mode: EnvMode,
    pub seed: u64,
    pub set: TestSet,
    /// Episode count override for evaluations.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n: Option<usize>,
    /// Policy checkpoint (evaluate, sweep) or search checkpoint (search-bo).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub run: RunSection,
    pub experiment: ExperimentConfig,
}

/// Values given on the command line; each one wins over the config file.
#[derive(Debug, Default, Clone)]
pub struct Overrides {
    pub mode: Option<Mode>,
    pub profile: Option<Profile>,
    pub env_mode: Option<EnvMode>,
    pub seed: Option<u64>,
    pub set: Option<TestSet>,
    pub n: Option<usize>,
    pub checkpoint: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

impl RunConfig {
    pub fn defaults(profile: Profile, env_mode: EnvMode) -> Self {
        Self {
            run: RunSection {
                mode: None,
                profile,
                env_mode,
                seed: 0,
                set: TestSet::Hard,
                n: None,
                checkpoint: None,
                out: None,
            },
            experiment: ExperimentConfig::for_profile(profile, env_mode),
        }
    }

    /// Builds the effective config from an optional TOML document and overrides.
    pub fn resolve(file: Option<&str>, cli: &Overrides) -> Result<Self> {
        let user: toml::Table = match file {
            Some(text) => text.parse().context("config file is not valid TOML")?,
            None => toml::Table::new(),
        };
        let run_key = |key: &str| -> Option<String> {
            user.get("run").and_then(|r| r.get(key)).and_then(|v| v.as_str()).map(str::to_string)
        };
        let profile = match (cli.profile, run_key("profile")) {
            (Some(p), _) => p,
            (None, Some(s)) => s.parse().map_err(|e| anyhow!("run.profile: {e}"))?,
            (None, None) => Profile::Desk,
        };
        let env_mode = match (cli.env_mode, run_key("env_mode")) {
            (Some(m), _) => m,
            (None, Some(s)) => s.parse().map_err(|e| anyhow!("run.env_mode: {e}"))?,
            (None, None) => EnvMode::Kp,
        };

        let mut merged = toml::Value::try_from(Self::defaults(profile, env_mode)).context("serializing defaults")?;
        merge(&mut merged, toml::Value::Table(user));
        let text = toml::to_string(&merged).context("serializing merged config")?;
        let mut cfg: RunConfig = toml::from_str(&text).map_err(|e| anyhow!("invalid config: {}", e.message()))?;

        cfg.run.profile = profile;
        cfg.run.env_mode = env_mode;
        if let Some(m) = cli.mode {
            cfg.run.mode = Some(m);
        }
        if let Some(s) = cli.seed {
            cfg.run.seed = s;
        }
        if let Some(s) = cli.set {
            cfg.run.set = s;
        }
        if let Some(n) = cli.n {
            cfg.run.n = Some(n);
        }
        if let Some(c) = &cli.checkpoint {
            cfg.run.checkpoint = Some(c.clone());
        }
        if let Some(o) = &cli.out {
            cfg.run.out = Some(o.clone());
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let mode = self.run.mode.ok_or_else(|| anyhow!("run.mode is missing (pass --mode)"))?;
        if self.run.out.is_none() {
            bail!("run.out is missing (pass --out)");
        }
        if self.run.n == Some(0) {
            bail!("run.n must be at least 1");
        }
        if matches!(mode, Mode::Evaluate | Mode::Sweep) && self.run.checkpoint.is_none() {
            bail!("run.checkpoint is required for {} (pass --checkpoint)", mode.to_possible_value().unwrap().get_name());
        }
        if self.experiment.env_mode != self.run.env_mode {
            bail!("experiment.env_mode ({}) disagrees with run.env_mode ({})", self.experiment.env_mode, self.run.env_mode);
        }
        self.experiment.validate().map_err(|e| anyhow!("experiment: {e}"))
    }

    pub fn mode(&self) -> Mode {
        self.run.mode.expect("validated config has a mode")
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    /// The config without its output directory, so relocated reruns share a digest.
    pub fn portable(&self) -> Self {
        let mut c = self.clone();
        c.run.out = None;
        c
    }
}

/// Recursively overlays `over` onto `base`; non-table values replace.
fn merge(base: &mut toml::Value, over: toml::Value) {
    match (base, over) {
        (toml::Value::Table(b), toml::Value::Table(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}
