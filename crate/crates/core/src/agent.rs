//! The episodic loop: estimate, perturb, plan, act, refit, and account for regret.

use std::time::Instant;

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::envs::{Environment, ORACLE_REFINEMENT};
use crate::error::{Error, Result};
use crate::estimation::{
    fit_reward_mle, fit_transition_mle, ConfidenceConstants, GramAccumulator, History, MleConfig,
    Transition,
};
use crate::exploration::{noise_scale, sample_perturbation, NoiseConfig};
use crate::model::{Family, ParamVector};
use crate::planner::{backward_induction, Backend, PolicyEvaluator, RffBasis, ValueTable};

/// Pseudo-regret in `[-REGRET_SLACK, 0)` is rounding and is recorded as zero.
const REGRET_SLACK: f64 = 1e-9;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PolicyKind {
    #[default]
    BefRlsvi,
    /// Uniformly random actions; a baseline for regret curves.
    Random,
}

#[derive(Clone, Debug)]
pub enum PlannerChoice {
    Exact,
    Rff(RffBasis),
}

impl PlannerChoice {
    fn backend(&self) -> Backend<'_> {
        match self {
            PlannerChoice::Exact => Backend::Exact,
            PlannerChoice::Rff(basis) => Backend::Rff(basis),
        }
    }
}

#[derive(Clone, Debug)]
pub struct AgentConfig {
    pub noise: NoiseConfig,
    pub mle: MleConfig,
    pub confidence: ConfidenceConstants,
    pub policy: PolicyKind,
    pub planner: PlannerChoice,
    pub timing: bool,
}

/// Everything the agent learns; enough to resume a run.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AgentState {
    pub theta_hat_p: ParamVector,
    pub theta_hat_r: ParamVector,
    pub gram_p: GramAccumulator,
    pub gram_r: GramAccumulator,
    pub history: History,
    /// Completed episodes.
    pub episode: usize,
    pub cum_regret: f64,
}

impl AgentState {
    /// `θ̂ = 0` (frozen coordinates copied from the environment) and
    /// regularizer-only Gram matrices.
    pub fn initial(env: &Environment, constants: &ConfidenceConstants) -> Result<AgentState> {
        let c = &constants.constants;
        let cold = |truth: &ParamVector| {
            let theta = DVector::from_fn(truth.len(), |i, _| {
                if truth.is_frozen(i) {
                    truth.theta[i]
                } else {
                    0.0
                }
            });
            ParamVector::new(theta).with_frozen(truth.frozen.clone())
        };
        Ok(AgentState {
            theta_hat_p: cold(&env.theta_p),
            theta_hat_r: cold(&env.theta_r),
            gram_p: GramAccumulator::new(&env.model, c.eta, c.alpha_p)?,
            gram_r: GramAccumulator::new(&env.model, c.eta, c.alpha_r)?,
            history: History::new(),
            episode: 0,
            cum_regret: 0.0,
        })
    }
}

/// One row of the per-seed CSV.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegretRecord {
    pub seed: u64,
    /// 1-based episode index.
    pub k: usize,
    pub v_star: f64,
    pub v_policy: f64,
    pub realized_return: f64,
    pub cum_regret: f64,
    pub optimism: bool,
    pub bad_round: bool,
    pub x_k: f64,
    pub noise_norm: f64,
    pub mle_iters_p: usize,
    pub mle_iters_r: usize,
    pub wall_ms: u64,
}

/// Oracle quantities under the true parameters on the refined grid.
#[derive(Clone, Debug)]
pub struct Oracle {
    pub evaluator: PolicyEvaluator,
    pub optimal: ValueTable,
    pub v_star: f64,
    pub v_random: f64,
}

impl Oracle {
    pub fn new(env: &Environment) -> Result<Oracle> {
        let model = env.oracle_model(ORACLE_REFINEMENT)?;
        let evaluator = PolicyEvaluator::new(&model, &env.theta_p.theta, &env.theta_r.theta)?;
        let optimal = evaluator.optimal(env.horizon);
        let s1 = env.initial_state;
        let v_star = (0..model.n_actions())
            .map(|a| evaluator.backup(&optimal, 1, s1, a))
            .collect::<Result<Vec<_>>>()?
            .into_iter()
            .fold(f64::NEG_INFINITY, f64::max);
        let uniform = evaluator.evaluate_uniform(env.horizon);
        let n_a = model.n_actions();
        let v_random = (0..n_a)
            .map(|a| evaluator.backup(&uniform, 1, s1, a))
            .sum::<Result<f64>>()?
            / n_a as f64;
        Ok(Oracle {
            evaluator,
            optimal,
            v_star,
            v_random,
        })
    }

    /// `V^π_1(s_1)` for the greedy policy of `table`.
    pub fn greedy_value(&self, env: &Environment, table: &ValueTable) -> Result<f64> {
        let policy = |h: usize, s: f64| table.greedy_action(h, s);
        let evaluated = self.evaluator.evaluate(env.horizon, &policy);
        let s1 = env.initial_state;
        self.evaluator
            .backup(&evaluated, 1, s1, table.greedy_action(1, s1))
    }
}

pub struct Agent<'e> {
    env: &'e Environment,
    oracle: &'e Oracle,
    config: AgentConfig,
    seed: u64,
    state: AgentState,
}

impl<'e> Agent<'e> {
    pub fn new(
        env: &'e Environment,
        oracle: &'e Oracle,
        config: AgentConfig,
        seed: u64,
    ) -> Result<Agent<'e>> {
        let state = AgentState::initial(env, &config.confidence)?;
        Agent::from_state(env, oracle, config, seed, state)
    }

    pub fn from_state(
        env: &'e Environment,
        oracle: &'e Oracle,
        config: AgentConfig,
        seed: u64,
        state: AgentState,
    ) -> Result<Agent<'e>> {
        config.noise.validate()?;
        config.mle.validate()?;
        let d = env.model.d();
        state.theta_hat_p.validate(d)?;
        state.theta_hat_r.validate(d)?;
        if state.gram_p.dim() != d || state.gram_r.dim() != d {
            return Err(Error::InvalidConfig(
                "Gram dimension does not match the model".into(),
            ));
        }
        Ok(Agent {
            env,
            oracle,
            config,
            seed,
            state,
        })
    }

    pub fn state(&self) -> &AgentState {
        &self.state
    }

    pub fn into_state(self) -> AgentState {
        self.state
    }

    /// Overrides the current estimates, e.g. to start from the truth.
    pub fn set_estimates(&mut self, theta_p: ParamVector, theta_r: ParamVector) -> Result<()> {
        let d = self.env.model.d();
        theta_p.validate(d)?;
        theta_r.validate(d)?;
        self.state.theta_hat_p = theta_p;
        self.state.theta_hat_r = theta_r;
        Ok(())
    }

    /// The RNG of episode `k` (1-based): one ChaCha stream per episode.
    pub fn episode_rng(seed: u64, k: usize) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(k as u64);
        rng
    }

    pub fn run_episode(&mut self) -> Result<(Vec<Transition>, RegretRecord)> {
        let k = self.state.episode + 1;
        self.episode(k).map_err(|e| Error::Episode {
            episode: k,
            source: Box::new(e),
        })
    }

    pub fn run(&mut self, episodes: usize) -> Result<Vec<RegretRecord>> {
        (0..episodes)
            .map(|_| self.run_episode().map(|(_, record)| record))
            .collect()
    }

    fn episode(&mut self, k: usize) -> Result<(Vec<Transition>, RegretRecord)> {
        let started = Instant::now();
        let env = self.env;
        let model = &env.model;
        let mut rng = Agent::episode_rng(self.seed, k);
        let s1 = env.initial_state;

        let (table, x_k, noise_norm) = match self.config.policy {
            PolicyKind::BefRlsvi => {
                let x_k = noise_scale(&self.config.confidence, k - 1, &self.config.noise);
                let xi = sample_perturbation(&self.state.gram_p, x_k, &mut rng);
                let noise_norm = self.state.gram_p.norm_sq(&xi).sqrt();
                let theta_tilde_r = &self.state.theta_hat_r.theta + &xi;
                let table = backward_induction(
                    model,
                    &self.state.theta_hat_p.theta,
                    &theta_tilde_r,
                    env.horizon,
                    self.config.planner.backend(),
                )?;
                (Some(table), x_k, noise_norm)
            }
            PolicyKind::Random => (None, 0.0, 0.0),
        };

        let mut trajectory = Vec::with_capacity(env.horizon);
        let mut s = s1;
        let mut bad_round = false;
        for h in 1..=env.horizon {
            let a = match &table {
                Some(t) => t.greedy_action(h, s),
                None => rng.random_range(0..model.n_actions()),
            };
            if self.state.gram_p.potential(&model.feature_block(s, a)) >= 1.0 {
                bad_round = true;
            }
            let (r, s_next) = env.step(s, a, &mut rng)?;
            trajectory.push(Transition {
                episode: k,
                step: h,
                s,
                a,
                r,
                s_next,
            });
            s = s_next;
        }
        let realized_return = trajectory.iter().map(|t| t.r).sum();

        for t in &trajectory {
            self.state.gram_p.update(model, t.s, t.a)?;
            self.state.gram_r.update(model, t.s, t.a)?;
            self.state.history.push(*t);
        }
        let data = &self.state.history.transitions;
        let fit_p = fit_transition_mle(model, data, &self.config.mle, &self.state.theta_hat_p)?;
        let fit_r = fit_reward_mle(model, data, &self.config.mle, &self.state.theta_hat_r)?;
        self.state.theta_hat_p = fit_p.param;
        self.state.theta_hat_r = fit_r.param;

        let v_star = self.oracle.v_star;
        let (v_policy, optimism) = match &table {
            Some(t) => (self.oracle.greedy_value(env, t)?, t.value(1, s1) >= v_star),
            None => (self.oracle.v_random, false),
        };
        let mut gap = v_star - v_policy;
        if (-REGRET_SLACK..0.0).contains(&gap) {
            gap = 0.0;
        }
        self.state.cum_regret += gap;
        self.state.episode = k;

        let record = RegretRecord {
            seed: self.seed,
            k,
            v_star,
            v_policy,
            realized_return,
            cum_regret: self.state.cum_regret,
            optimism,
            bad_round,
            x_k,
            noise_norm,
            mle_iters_p: fit_p.iterations,
            mle_iters_r: fit_r.iterations,
            wall_ms: if self.config.timing {
                started.elapsed().as_millis() as u64
            } else {
                0
            },
        };
        Ok((trajectory, record))
    }
}

/// Rebuilds both Gram matrices from the history alone.
pub fn reassemble_grams(
    env: &Environment,
    constants: &ConfidenceConstants,
    history: &History,
) -> Result<(GramAccumulator, GramAccumulator)> {
    let c = &constants.constants;
    let mut gram_p = GramAccumulator::new(&env.model, c.eta, constants.alpha(Family::Transition))?;
    let mut gram_r = GramAccumulator::new(&env.model, c.eta, constants.alpha(Family::Reward))?;
    for t in history.iter() {
        gram_p.update(&env.model, t.s, t.a)?;
        gram_r.update(&env.model, t.s, t.a)?;
    }
    Ok((gram_p, gram_r))
}
