//! Experiment orchestration: configuration, multi-seed runs and result files.

pub mod config;
mod report;

use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::agent::{Agent, AgentConfig, AgentState, Oracle, PlannerChoice, RegretRecord};
use crate::diagnostics::{estimate_constants, ConstantsEstimate};
use crate::envs::{EnvDef, Environment};
use crate::error::{Error, Result};
use crate::estimation::ConfidenceConstants;
use crate::exploration::NoiseConfig;
use crate::planner::RffBasis;

pub use config::{
    parse_seeds, ConstantOverrides, FeatureSchedule, PlannerConfig, RunConfig,
    CONFIG_SCHEMA_VERSION, OUTPUT_ENV_VAR,
};
pub use report::{
    check_model, diagnose, plot_data, read_records, write_plot_data, DiagnoseOptions,
    ModelCheckReport, PlotRow,
};

pub const CHECKPOINT_SCHEMA_VERSION: u32 = 1;

/// Seed of the parameter samples used to estimate curvature constants.
pub const CONSTANTS_SEED: u64 = 0x5eed_c0de;

/// Column order of every per-seed and aggregate CSV.
pub const RECORD_HEADER: [&str; 13] = [
    "seed",
    "k",
    "v_star",
    "v_policy",
    "realized_return",
    "cum_regret",
    "optimism",
    "bad_round",
    "x_k",
    "noise_norm",
    "mle_iters_p",
    "mle_iters_r",
    "wall_ms",
];

/// Everything shared by the seeds of one run.
#[derive(Clone, Debug)]
pub struct Experiment {
    pub config: RunConfig,
    pub env: Environment,
    pub oracle: Oracle,
    pub confidence: ConfidenceConstants,
    pub estimate: ConstantsEstimate,
    pub planner: PlannerChoice,
}

impl Experiment {
    pub fn prepare(config: &RunConfig) -> Result<Experiment> {
        config.validate()?;
        let mut env = Environment::resolve(&config.env)?;
        if let Some(h) = config.horizon {
            env.horizon = h;
        }
        let overrides = &config.constants;
        let b_a = overrides.b_a.unwrap_or(env.b_a);
        if b_a < env.b_a {
            return Err(Error::InvalidConfig(format!(
                "constants.b_a = {b_a} is below the environment's bound {}",
                env.b_a
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(CONSTANTS_SEED);
        let estimate = estimate_constants(
            &env.model,
            &env.theta_p,
            &env.theta_r,
            b_a,
            config.constant_samples,
            &mut rng,
        )?;
        let mut constants = estimate.to_constants(&env.model, config.mle.eta, b_a);
        constants.alpha_p = overrides.alpha_p.unwrap_or(constants.alpha_p);
        constants.beta_p = overrides.beta_p.unwrap_or(constants.beta_p);
        constants.alpha_r = overrides.alpha_r.unwrap_or(constants.alpha_r);
        constants.beta_r = overrides.beta_r.unwrap_or(constants.beta_r);
        constants
            .validate()
            .map_err(|e| Error::InvalidConfig(e.to_string()))?;
        let confidence =
            ConfidenceConstants::new(constants, env.model.d(), env.horizon, config.delta)?;
        let planner = match (
            &config.planner,
            config
                .planner
                .feature_count(env.model.p(), env.horizon, config.episodes),
        ) {
            (PlannerConfig::Rff { seed, .. }, Some(n)) => {
                PlannerChoice::Rff(RffBasis::from_seed(env.model.p(), n, *seed))
            }
            _ => PlannerChoice::Exact,
        };
        let oracle = Oracle::new(&env)?;
        Ok(Experiment {
            config: config.clone(),
            env,
            oracle,
            confidence,
            estimate,
            planner,
        })
    }

    pub fn agent_config(&self) -> AgentConfig {
        AgentConfig {
            noise: self.config.noise.clone(),
            mle: self.config.mle.clone(),
            confidence: self.confidence.clone(),
            policy: self.config.policy,
            planner: self.planner.clone(),
            timing: self.config.timing,
        }
    }

    fn checkpoint(&self, seed: u64, state: &AgentState) -> Checkpoint {
        Checkpoint {
            schema_version: CHECKPOINT_SCHEMA_VERSION,
            seed,
            config: self.config.clone(),
            env: self.env.to_def(),
            confidence: self.confidence.clone(),
            state: state.clone(),
        }
    }

    /// Runs all episodes of one seed; with `out`, writes periodic and final
    /// checkpoints there.
    pub fn run_seed(&self, seed: u64, out: Option<&Path>) -> Result<SeedRun> {
        let mut agent = Agent::new(&self.env, &self.oracle, self.agent_config(), seed)?;
        let mut records = Vec::with_capacity(self.config.episodes);
        for k in 1..=self.config.episodes {
            records.push(agent.run_episode()?.1);
            if let (Some(dir), Some(every)) = (out, self.config.checkpoint_every) {
                if k % every == 0 {
                    self.checkpoint(seed, agent.state())
                        .save(&checkpoint_path(dir, seed))?;
                }
            }
        }
        let state = agent.into_state();
        if let Some(dir) = out {
            self.checkpoint(seed, &state)
                .save(&checkpoint_path(dir, seed))?;
        }
        Ok(SeedRun {
            seed,
            records,
            state,
        })
    }

    /// All seeds in parallel (at most `jobs` threads), returned in seed order.
    pub fn run_seeds(&self, out: Option<&Path>) -> Result<Vec<SeedRun>> {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(self.config.jobs.unwrap_or(0))
            .build()
            .map_err(|e| Error::InvalidConfig(format!("thread pool: {e}")))?;
        pool.install(|| {
            self.config
                .seeds
                .par_iter()
                .map(|&seed| self.run_seed(seed, out))
                .collect()
        })
    }
}

#[derive(Clone, Debug)]
pub struct SeedRun {
    pub seed: u64,
    pub records: Vec<RegretRecord>,
    pub state: AgentState,
}

/// Everything needed to resume or diagnose a seed.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub schema_version: u32,
    pub seed: u64,
    pub config: RunConfig,
    pub env: EnvDef,
    pub confidence: ConfidenceConstants,
    pub state: AgentState,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        write_file(path, &serde_json::to_string(self)?)
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let checkpoint: Checkpoint = serde_json::from_str(&text)?;
        if checkpoint.schema_version != CHECKPOINT_SCHEMA_VERSION {
            return Err(Error::InvalidConfig(format!(
                "unsupported checkpoint schema_version {}",
                checkpoint.schema_version
            )));
        }
        Ok(checkpoint)
    }
}

pub fn seed_csv_path(dir: &Path, seed: u64) -> PathBuf {
    dir.join(format!("seed-{seed}.csv"))
}

pub fn checkpoint_path(dir: &Path, seed: u64) -> PathBuf {
    dir.join(format!("seed-{seed}.checkpoint.json"))
}

pub fn aggregate_path(dir: &Path) -> PathBuf {
    dir.join("aggregate.csv")
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

/// The records as CSV text, header first.
pub fn records_to_csv(records: &[RegretRecord]) -> Result<String> {
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_writer(Vec::new());
    w.write_record(RECORD_HEADER)?;
    for r in records {
        w.serialize(r)?;
    }
    let bytes = w
        .into_inner()
        .map_err(|e| Error::io("<csv>", e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
}

#[derive(Clone, Debug)]
pub struct RunOutput {
    pub dir: PathBuf,
    pub runs: Vec<SeedRun>,
    pub experiment: Experiment,
}

/// Runs every seed and writes per-seed CSVs, checkpoints, the aggregate CSV,
/// the resolved config and the constants into `dir`.
pub fn run_experiment_in(config: &RunConfig, dir: &Path) -> Result<RunOutput> {
    let experiment = Experiment::prepare(config)?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_file(&dir.join("config.json"), &config.to_json())?;
    let constants = serde_json::json!({
        "confidence": experiment.confidence,
        "estimate": experiment.estimate,
    });
    write_file(
        &dir.join("constants.json"),
        &serde_json::to_string_pretty(&constants)?,
    )?;
    let runs = experiment.run_seeds(Some(dir))?;
    let mut all = Vec::new();
    for run in &runs {
        write_file(
            &seed_csv_path(dir, run.seed),
            &records_to_csv(&run.records)?,
        )?;
        all.extend(run.records.iter().cloned());
    }
    write_file(&aggregate_path(dir), &records_to_csv(&all)?)?;
    Ok(RunOutput {
        dir: dir.to_path_buf(),
        runs,
        experiment,
    })
}

/// [`run_experiment_in`] the configured (or overridden) output directory.
pub fn run_experiment(config: &RunConfig) -> Result<RunOutput> {
    run_experiment_in(config, &config.effective_output_dir())
}

#[derive(Clone, Debug, PartialEq)]
pub enum SweepAxis {
    Episodes(Vec<usize>),
    NoiseFactor(Vec<f64>),
}

/// One run per value of the axis, each in its own subdirectory.
pub fn sweep(config: &RunConfig, axis: &SweepAxis) -> Result<Vec<RunOutput>> {
    let base = config.effective_output_dir();
    let variants: Vec<(String, RunConfig)> = match axis {
        SweepAxis::Episodes(ks) => ks
            .iter()
            .map(|&k| {
                let mut c = config.clone();
                c.episodes = k;
                (format!("episodes-{k}"), c)
            })
            .collect(),
        SweepAxis::NoiseFactor(fs) => fs
            .iter()
            .map(|&f| {
                let mut c = config.clone();
                c.noise = NoiseConfig::Scaled { factor: f };
                (format!("noise-{f}"), c)
            })
            .collect(),
    };
    if variants.is_empty() {
        return Err(Error::InvalidConfig(
            "sweep needs at least one value".into(),
        ));
    }
    variants
        .iter()
        .map(|(label, c)| {
            let mut c = c.clone();
            c.output_dir = base.join(label);
            run_experiment_in(&c, &c.output_dir.clone())
        })
        .collect()
}
