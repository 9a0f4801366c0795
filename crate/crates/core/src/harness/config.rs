use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::agent::PolicyKind;
use crate::error::{Error, Result};
use crate::estimation::MleConfig;
use crate::exploration::NoiseConfig;

pub const CONFIG_SCHEMA_VERSION: u32 = 1;

/// Overrides the output directory of every run.
pub const OUTPUT_ENV_VAR: &str = "BEF_RLSVI_OUT";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FeatureSchedule {
    /// Exactly `features` random features.
    #[default]
    Fixed,
    /// `min(features, ⌈p H² K log(HK)⌉)`.
    Growing,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "backend", rename_all = "kebab-case", deny_unknown_fields)]
pub enum PlannerConfig {
    #[default]
    Exact,
    Rff {
        features: usize,
        #[serde(default)]
        seed: u64,
        #[serde(default)]
        schedule: FeatureSchedule,
    },
}

impl PlannerConfig {
    /// Number of random features for a run with the given sizes, if any.
    pub fn feature_count(&self, p: usize, horizon: usize, episodes: usize) -> Option<usize> {
        match *self {
            PlannerConfig::Exact => None,
            PlannerConfig::Rff {
                features,
                schedule: FeatureSchedule::Fixed,
                ..
            } => Some(features),
            PlannerConfig::Rff {
                features,
                schedule: FeatureSchedule::Growing,
                ..
            } => {
                let hk = (horizon * episodes.max(1)) as f64;
                let wanted =
                    (p as f64 * (horizon * horizon) as f64 * episodes.max(1) as f64 * hk.ln())
                        .ceil()
                        .max(1.0);
                Some(features.min(wanted as usize))
            }
        }
    }
}

/// Replacements for individual estimated curvature constants.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConstantOverrides {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha_p: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub beta_p: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha_r: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub beta_r: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub b_a: Option<f64>,
}

fn default_delta() -> f64 {
    0.05
}

fn default_mle() -> MleConfig {
    MleConfig::new(1.0)
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("runs")
}

fn default_seeds() -> Vec<u64> {
    vec![0]
}

fn default_concentration() -> f64 {
    2.0
}

fn default_constant_samples() -> usize {
    64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    /// A builtin environment name or a path to an environment file.
    pub env: String,
    pub episodes: usize,
    /// Overrides the environment's horizon.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub horizon: Option<usize>,
    #[serde(default = "default_noise")]
    pub noise: NoiseConfig,
    #[serde(default)]
    pub planner: PlannerConfig,
    #[serde(default = "default_mle")]
    pub mle: MleConfig,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    #[serde(default = "default_delta")]
    pub delta: f64,
    #[serde(default)]
    pub policy: PolicyKind,
    /// `c` in the reported noise concentration bound `c √(x d log(d/δ))`.
    #[serde(default = "default_concentration")]
    pub concentration_constant: f64,
    #[serde(default)]
    pub constants: ConstantOverrides,
    /// Parameter samples per family when estimating curvature constants.
    #[serde(default = "default_constant_samples")]
    pub constant_samples: usize,
    /// Record per-episode wall time (makes CSVs nondeterministic).
    #[serde(default)]
    pub timing: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checkpoint_every: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub jobs: Option<usize>,
}

fn default_noise() -> NoiseConfig {
    NoiseConfig::Theoretical
}

impl RunConfig {
    /// A config with defaults for everything but the environment and `K`.
    pub fn new(env: impl Into<String>, episodes: usize) -> RunConfig {
        RunConfig {
            schema_version: CONFIG_SCHEMA_VERSION,
            env: env.into(),
            episodes,
            horizon: None,
            noise: default_noise(),
            planner: PlannerConfig::default(),
            mle: default_mle(),
            seeds: default_seeds(),
            output_dir: default_output_dir(),
            delta: default_delta(),
            policy: PolicyKind::default(),
            concentration_constant: default_concentration(),
            constants: ConstantOverrides::default(),
            constant_samples: default_constant_samples(),
            timing: false,
            checkpoint_every: None,
            jobs: None,
        }
    }

    pub fn from_json(text: &str) -> Result<RunConfig> {
        let config: RunConfig = serde_json::from_str(text)?;
        config.validate()?;
        Ok(config)
    }

    /// Reads a config; a relative `env` path is resolved against the
    /// config file's directory when it exists there.
    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut config: RunConfig = serde_json::from_str(&text)?;
        if let Some(dir) = path.parent() {
            let candidate = dir.join(&config.env);
            if Path::new(&config.env).is_relative() && candidate.is_file() {
                config.env = candidate.to_string_lossy().into_owned();
            }
        }
        config.validate()?;
        Ok(config)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::InvalidConfig(msg));
        if self.schema_version != CONFIG_SCHEMA_VERSION {
            return fail(format!(
                "unsupported schema_version {} (expected {CONFIG_SCHEMA_VERSION})",
                self.schema_version
            ));
        }
        if self.horizon == Some(0) {
            return fail("horizon must be at least 1".into());
        }
        if self.seeds.is_empty() {
            return fail("seeds must be nonempty".into());
        }
        let mut sorted = self.seeds.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != self.seeds.len() {
            return fail("seeds must be distinct".into());
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return fail(format!("delta must lie in (0, 1), got {}", self.delta));
        }
        if !(self.concentration_constant > 0.0 && self.concentration_constant.is_finite()) {
            return fail("concentration_constant must be positive".into());
        }
        if let PlannerConfig::Rff { features: 0, .. } = self.planner {
            return fail("planner.features must be at least 1".into());
        }
        if self.checkpoint_every == Some(0) || self.jobs == Some(0) {
            return fail("checkpoint_every and jobs must be at least 1 when set".into());
        }
        self.noise.validate()?;
        self.mle.validate()
    }

    /// `output_dir`, unless the environment variable overrides it.
    pub fn effective_output_dir(&self) -> PathBuf {
        match std::env::var_os(OUTPUT_ENV_VAR) {
            Some(dir) if !dir.is_empty() => PathBuf::from(dir),
            _ => self.output_dir.clone(),
        }
    }
}

/// Parses `a..b` (inclusive), `a..=b`, or a comma-separated list.
pub fn parse_seeds(text: &str) -> Result<Vec<u64>> {
    let bad = || Error::InvalidConfig(format!("cannot parse seeds {text:?}"));
    let num = |s: &str| s.trim().parse::<u64>().map_err(|_| bad());
    if let Some((lo, hi)) = text.split_once("..") {
        let hi = hi.strip_prefix('=').unwrap_or(hi);
        let (lo, hi) = (num(lo)?, num(hi)?);
        if lo > hi {
            return Err(bad());
        }
        return Ok((lo..=hi).collect());
    }
    text.split(',').map(num).collect()
}
