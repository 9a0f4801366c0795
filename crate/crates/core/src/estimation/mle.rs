//! Penalized MLE by damped Newton.
//!
//! Both objectives are convex: a sum of log-partitions (convex in θ) minus a
//! linear term, plus `(η/2)θᵀ𝔸θ`. Observations are grouped by `(s, a)` so each
//! distinct pair is integrated once per evaluation.

use std::collections::HashMap;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::Transition;
use crate::error::{Error, Result};
use crate::model::{reward, BefModel, ParamVector};

const ARMIJO: f64 = 1e-4;
const MAX_HALVINGS: usize = 60;
/// Newton decrements below this (relative to the objective) are rounding noise.
const DECREMENT_FLOOR: f64 = 1e-12;

fn default_tolerance() -> f64 {
    1e-8
}

fn default_max_iter() -> usize {
    200
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MleConfig {
    pub eta: f64,
    /// Stop once the ∞-norm of the free-coordinate gradient falls below this.
    #[serde(default = "default_tolerance")]
    pub tolerance: f64,
    #[serde(default = "default_max_iter")]
    pub max_iter: usize,
}

impl MleConfig {
    pub fn new(eta: f64) -> MleConfig {
        MleConfig {
            eta,
            tolerance: default_tolerance(),
            max_iter: default_max_iter(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.eta > 0.0 && self.eta.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "mle.eta must be positive, got {}",
                self.eta
            )));
        }
        if self.tolerance.is_nan() || self.tolerance <= 0.0 || self.max_iter == 0 {
            return Err(Error::InvalidConfig(
                "mle.tolerance must be positive and mle.max_iter at least 1".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct MleFit {
    pub param: ParamVector,
    pub iterations: usize,
    /// ∞-norm of the stationarity residual over free coordinates.
    pub residual: f64,
    pub objective: f64,
}

trait Objective {
    fn value(&self, theta: &DVector<f64>) -> Result<f64>;
    fn derivatives(&self, theta: &DVector<f64>) -> Result<(f64, DVector<f64>, DMatrix<f64>)>;
    /// Size of the data term, used to scale the fallback acceptance threshold.
    fn scale(&self) -> f64;
}

fn group_key(t: &Transition) -> (u64, usize) {
    (t.s.to_bits(), t.a)
}

struct TransitionGroup {
    block: DMatrix<f64>,
    count: f64,
    psi_sum: DVector<f64>,
}

struct TransitionObjective<'a> {
    model: &'a BefModel,
    eta: f64,
    groups: Vec<TransitionGroup>,
    n: usize,
}

impl<'a> TransitionObjective<'a> {
    fn new(model: &'a BefModel, data: &[Transition], eta: f64) -> TransitionObjective<'a> {
        let mut index = HashMap::new();
        let mut groups: Vec<TransitionGroup> = Vec::new();
        for t in data {
            let g = *index.entry(group_key(t)).or_insert_with(|| {
                groups.push(TransitionGroup {
                    block: model.feature_block(t.s, t.a),
                    count: 0.0,
                    psi_sum: DVector::zeros(model.p()),
                });
                groups.len() - 1
            });
            groups[g].count += 1.0;
            groups[g].psi_sum += model.psi(t.s_next);
        }
        TransitionObjective {
            model,
            eta,
            groups,
            n: data.len(),
        }
    }

    fn penalty(&self, theta: &DVector<f64>) -> (f64, DVector<f64>) {
        let a_theta = self.model.trace_gram() * theta;
        (0.5 * self.eta * theta.dot(&a_theta), a_theta * self.eta)
    }
}

impl Objective for TransitionObjective<'_> {
    fn value(&self, theta: &DVector<f64>) -> Result<f64> {
        let mut total = self.penalty(theta).0;
        for g in &self.groups {
            let natural = &g.block * theta;
            let z = self.model.dist_from_natural(&natural)?.log_partition;
            total += g.count * z - g.psi_sum.dot(&natural);
        }
        Ok(total)
    }

    fn derivatives(&self, theta: &DVector<f64>) -> Result<(f64, DVector<f64>, DMatrix<f64>)> {
        let (mut value, mut grad) = self.penalty(theta);
        let mut hess = self.model.trace_gram() * self.eta;
        for g in &self.groups {
            let natural = &g.block * theta;
            let dist = self.model.dist_from_natural(&natural)?;
            value += g.count * dist.log_partition - g.psi_sum.dot(&natural);
            let mean = dist.mean_psi(self.model.psi_grid());
            grad += g.block.transpose() * (mean * g.count - &g.psi_sum);
            let cov = dist.cov_psi(self.model.psi_grid());
            hess += g.block.transpose() * (cov * g.count) * &g.block;
        }
        Ok((value, grad, hess))
    }

    fn scale(&self) -> f64 {
        self.n as f64
    }
}

struct RewardGroup {
    direction: DVector<f64>,
    count: f64,
    r_sum: f64,
}

struct RewardObjective<'a> {
    model: &'a BefModel,
    eta: f64,
    groups: Vec<RewardGroup>,
    n: usize,
}

impl<'a> RewardObjective<'a> {
    fn new(model: &'a BefModel, data: &[Transition], eta: f64) -> RewardObjective<'a> {
        let mut index = HashMap::new();
        let mut groups: Vec<RewardGroup> = Vec::new();
        for t in data {
            let g = *index.entry(group_key(t)).or_insert_with(|| {
                groups.push(RewardGroup {
                    direction: model.reward_direction(t.s, t.a),
                    count: 0.0,
                    r_sum: 0.0,
                });
                groups.len() - 1
            });
            groups[g].count += 1.0;
            groups[g].r_sum += t.r;
        }
        RewardObjective {
            model,
            eta,
            groups,
            n: data.len(),
        }
    }
}

impl Objective for RewardObjective<'_> {
    fn value(&self, theta: &DVector<f64>) -> Result<f64> {
        let a_theta = self.model.trace_gram() * theta;
        let mut total = 0.5 * self.eta * theta.dot(&a_theta);
        for g in &self.groups {
            let c = g.direction.dot(theta);
            total += g.count * reward::log_partition(c) - g.r_sum * c;
        }
        if total.is_finite() {
            Ok(total)
        } else {
            Err(Error::NonFinite("reward likelihood"))
        }
    }

    fn derivatives(&self, theta: &DVector<f64>) -> Result<(f64, DVector<f64>, DMatrix<f64>)> {
        let a_theta = self.model.trace_gram() * theta;
        let mut value = 0.5 * self.eta * theta.dot(&a_theta);
        let mut grad = a_theta * self.eta;
        let mut hess = self.model.trace_gram() * self.eta;
        for g in &self.groups {
            let c = g.direction.dot(theta);
            value += g.count * reward::log_partition(c) - g.r_sum * c;
            grad.axpy(g.count * reward::mean(c) - g.r_sum, &g.direction, 1.0);
            hess.ger(
                g.count * reward::variance(c),
                &g.direction,
                &g.direction,
                1.0,
            );
        }
        Ok((value, grad, hess))
    }

    fn scale(&self) -> f64 {
        self.n as f64
    }
}

fn restrict(
    grad: &DVector<f64>,
    hess: &DMatrix<f64>,
    free: &[usize],
) -> (DVector<f64>, DMatrix<f64>) {
    let g = DVector::from_iterator(free.len(), free.iter().map(|&i| grad[i]));
    let h = DMatrix::from_fn(free.len(), free.len(), |i, j| hess[(free[i], free[j])]);
    (g, h)
}

fn newton(
    obj: &dyn Objective,
    start: &ParamVector,
    config: &MleConfig,
    what: &'static str,
) -> Result<MleFit> {
    config.validate()?;
    let free = start.free_indices();
    let mut theta = start.theta.clone();
    let done = |theta: DVector<f64>, iterations, residual, objective| MleFit {
        param: ParamVector {
            theta,
            frozen: start.frozen.clone(),
        },
        iterations,
        residual,
        objective,
    };

    for iter in 0..=config.max_iter {
        let (value, grad, hess) = obj.derivatives(&theta)?;
        let (g, h) = restrict(&grad, &hess, &free);
        let residual = g.amax();
        if residual <= config.tolerance {
            return Ok(done(theta, iter, residual, value));
        }
        if iter == config.max_iter {
            return Err(Error::NoConvergence {
                what,
                iterations: iter,
                residual,
            });
        }
        let step = h
            .cholesky()
            .ok_or(Error::NotPositiveDefinite("MLE Hessian"))?
            .solve(&(-&g));
        let slope = g.dot(&step);
        if -slope <= DECREMENT_FLOOR * (1.0 + value.abs()) {
            // the objective cannot resolve the decrease; take the full step
            for (k, &i) in free.iter().enumerate() {
                theta[i] += step[k];
            }
            continue;
        }
        let mut t = 1.0;
        let mut accepted = None;
        for _ in 0..MAX_HALVINGS {
            let mut trial = theta.clone();
            for (k, &i) in free.iter().enumerate() {
                trial[i] += t * step[k];
            }
            match obj.value(&trial) {
                Ok(v) if v <= value + ARMIJO * t * slope => {
                    accepted = Some(trial);
                    break;
                }
                _ => t *= 0.5,
            }
        }
        match accepted {
            Some(next) => theta = next,
            // no representable decrease left: we are at the floating-point floor
            None if residual <= 1e-7 * (1.0 + obj.scale()) => {
                return Ok(done(theta, iter, residual, value));
            }
            None => {
                return Err(Error::NoConvergence {
                    what,
                    iterations: iter,
                    residual,
                })
            }
        }
    }
    unreachable!("loop returns on its last iteration")
}

fn check_start(model: &BefModel, warm_start: &ParamVector) -> Result<()> {
    warm_start.validate(model.d())
}

/// `θ̂^p = argmin Σ −log P_θ(s'|s,a) + (η/2)‖θ‖²_𝔸` over the unfrozen coordinates.
pub fn fit_transition_mle(
    model: &BefModel,
    data: &[Transition],
    config: &MleConfig,
    warm_start: &ParamVector,
) -> Result<MleFit> {
    check_start(model, warm_start)?;
    let obj = TransitionObjective::new(model, data, config.eta);
    newton(&obj, warm_start, config, "transition MLE")
}

/// Reward counterpart of [`fit_transition_mle`].
pub fn fit_reward_mle(
    model: &BefModel,
    data: &[Transition],
    config: &MleConfig,
    warm_start: &ParamVector,
) -> Result<MleFit> {
    check_start(model, warm_start)?;
    let obj = RewardObjective::new(model, data, config.eta);
    newton(&obj, warm_start, config, "reward MLE")
}

/// `Σ_t Φ_tᵀ(E_θ[ψ] − ψ(s'_t)) + η𝔸θ`, zero at an unconstrained optimum.
pub fn transition_stationarity(
    model: &BefModel,
    data: &[Transition],
    eta: f64,
    theta: &DVector<f64>,
) -> Result<DVector<f64>> {
    Ok(TransitionObjective::new(model, data, eta)
        .derivatives(theta)?
        .1)
}

/// `Σ_t (E_θ[r] − r_t) BᵀA_iφ_t + η𝔸θ`.
pub fn reward_stationarity(
    model: &BefModel,
    data: &[Transition],
    eta: f64,
    theta: &DVector<f64>,
) -> Result<DVector<f64>> {
    Ok(RewardObjective::new(model, data, eta).derivatives(theta)?.1)
}

/// Penalized negative log-likelihood of the transition data.
pub fn transition_objective(
    model: &BefModel,
    data: &[Transition],
    eta: f64,
    theta: &DVector<f64>,
) -> Result<f64> {
    TransitionObjective::new(model, data, eta).value(theta)
}

/// Penalized negative log-likelihood of the reward data.
pub fn reward_objective(
    model: &BefModel,
    data: &[Transition],
    eta: f64,
    theta: &DVector<f64>,
) -> Result<f64> {
    RewardObjective::new(model, data, eta).value(theta)
}
