//! Numerical checks of the regret-analysis guarantees on concrete models and run data.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::agent::RegretRecord;
use crate::error::{Error, Result};
use crate::estimation::{
    fit_reward_mle, fit_transition_mle, ConfidenceConstants, GramAccumulator, History, MleConfig,
};
use crate::model::{reward, BefModel, Family, ModelConstants, ParamVector};

/// Slack allowed on every inequality check.
pub const CHECK_SLACK: f64 = 1e-10;

/// Points used to discretize the segment `[θ1, θ2]`.
pub const SEGMENT_POINTS: usize = 33;

/// Smallest admissible curvature lower bound.
pub const MIN_ALPHA: f64 = 1e-8;

/// `3d/log 2 · log(1 + L²/(λ log 2))`: the most episodes whose feature block
/// can reach potential 1 when `Ḡ ⪰ λI` and `tr G_{s,a} ≤ L²`.
pub fn elliptical_bound(d: usize, l_sq: f64, lambda: f64) -> f64 {
    let ln2 = std::f64::consts::LN_2;
    3.0 * d as f64 / ln2 * (1.0 + l_sq / (lambda * ln2)).ln()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BadRoundReport {
    pub count: usize,
    pub bound: f64,
    pub l_sq: f64,
    pub lambda: f64,
    /// Episodes that were bad, 1-based.
    pub episodes: Vec<usize>,
}

impl BadRoundReport {
    pub fn ok(&self) -> bool {
        self.count as f64 <= self.bound
    }
}

fn episodes(history: &History) -> Vec<&[crate::estimation::Transition]> {
    history
        .transitions
        .chunk_by(|x, y| x.episode == y.episode)
        .collect()
}

/// Replays the history against `gram` (the regularizer-only accumulator) and
/// counts episodes with a step of potential at least one under the
/// pre-episode Gram matrix.
pub fn count_bad_rounds(
    model: &BefModel,
    history: &History,
    mut gram: GramAccumulator,
) -> Result<BadRoundReport> {
    let lambda = SymmetricEigen::new(gram.matrix()).eigenvalues.min();
    let l_sq = model.max_feature_frobenius_sq();
    let mut bad = Vec::new();
    for episode in episodes(history) {
        if episode
            .iter()
            .any(|t| gram.potential(&model.feature_block(t.s, t.a)) >= 1.0)
        {
            bad.push(episode[0].episode);
        }
        for t in episode {
            gram.update(model, t.s, t.a)?;
        }
    }
    Ok(BadRoundReport {
        count: bad.len(),
        bound: elliptical_bound(model.d(), l_sq, lambda),
        l_sq,
        lambda,
        episodes: bad,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EllipticalSumReport {
    /// `Σ_k min{1, Σ_h tr(Ḡ_k⁻¹ G_{s_h, a_h})}`.
    pub sum: f64,
    /// `(c/log(1+c)) · d · log(1 + α η⁻¹ B_{φ,𝔸} n)` at `c = 1`.
    pub bound: f64,
    pub steps: usize,
    pub ok: bool,
}

/// Sum of capped per-episode potentials against its logarithmic bound.
pub fn elliptical_sum_check(
    model: &BefModel,
    history: &History,
    eta: f64,
    alpha: f64,
) -> Result<EllipticalSumReport> {
    let mut gram = GramAccumulator::new(model, eta, alpha)?;
    let mut sum = 0.0;
    for episode in episodes(history) {
        let potential: f64 = episode
            .iter()
            .map(|t| gram.potential(&model.feature_block(t.s, t.a)))
            .sum();
        sum += potential.min(1.0);
        for t in episode {
            gram.update(model, t.s, t.a)?;
        }
    }
    let n = history.len();
    let c = 1.0f64;
    let bound =
        c / c.ln_1p() * model.d() as f64 * (alpha / eta * model.b_phi_a() * n as f64).ln_1p();
    Ok(EllipticalSumReport {
        sum,
        bound,
        steps: n,
        ok: sum <= bound + CHECK_SLACK,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransportationCheck {
    /// `E_Q[f] − E_P[f]` with `P = P_θ1`, `Q = P_θ2`.
    pub lhs: f64,
    /// `√(2 V_P[f] KL(Q, P)) + (2 S(f)/3) KL(Q, P)`.
    pub rhs: f64,
    pub ok: bool,
    /// `E_P[f] − E_Q[f]`.
    pub lhs_lower: f64,
    /// `√(2 V_P[f] KL(Q, P))`.
    pub rhs_lower: f64,
    pub ok_lower: bool,
    pub kl: f64,
}

/// Both transportation inequalities for `f` given by its values on the grid.
pub fn check_transportation(
    model: &BefModel,
    theta1: &DVector<f64>,
    theta2: &DVector<f64>,
    s: f64,
    a: usize,
    f_values: &[f64],
) -> Result<TransportationCheck> {
    if f_values.len() != model.grid().len() {
        return Err(Error::InvalidModel(format!(
            "f has {} values, grid has {}",
            f_values.len(),
            model.grid().len()
        )));
    }
    let p = model.next_state_dist(theta1, s, a)?;
    let q = model.next_state_dist(theta2, s, a)?;
    let (mean_p, var_p) = p.mean_var(f_values);
    let mean_q = q.expectation(f_values);
    let kl = model.kl_p(theta2, theta1, s, a)?.max(0.0);
    let (lo, hi) = f_values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &x| {
            (lo.min(x), hi.max(x))
        });
    let span = hi - lo;
    let rhs_lower = (2.0 * var_p * kl).sqrt();
    let rhs = rhs_lower + 2.0 * span / 3.0 * kl;
    let lhs = mean_q - mean_p;
    Ok(TransportationCheck {
        lhs,
        rhs,
        ok: lhs <= rhs + CHECK_SLACK,
        lhs_lower: -lhs,
        rhs_lower,
        ok_lower: -lhs <= rhs_lower + CHECK_SLACK,
        kl,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RewardTransportationCheck {
    /// `|E^{θ1}[r] − E^{θ2}[r]|`.
    pub gap: f64,
    /// `sup_segment (Var/2) · |Bᵀ M_{θ1−θ2} φ|`.
    pub bound: f64,
    pub ok: bool,
    /// `sup_segment Var · |Bᵀ M_{θ1−θ2} φ|`, the exact mean-value form.
    pub mean_value_bound: f64,
    pub mean_value_ok: bool,
}

/// Expected-reward gap against its variance-weighted bound, with the
/// supremum over a discretized segment.
pub fn check_reward_transportation(
    model: &BefModel,
    theta1: &DVector<f64>,
    theta2: &DVector<f64>,
    s: f64,
    a: usize,
) -> RewardTransportationCheck {
    let c1 = model.reward_natural(theta1, s, a);
    let c2 = model.reward_natural(theta2, s, a);
    let gap = (reward::mean(c1) - reward::mean(c2)).abs();
    let sup_var = (0..SEGMENT_POINTS)
        .map(|i| {
            let t = i as f64 / (SEGMENT_POINTS - 1) as f64;
            reward::variance((1.0 - t) * c1 + t * c2)
        })
        .fold(0.0, f64::max);
    let dc = (c1 - c2).abs();
    let bound = 0.5 * sup_var * dc;
    let mean_value_bound = sup_var * dc;
    RewardTransportationCheck {
        gap,
        bound,
        ok: gap <= bound + CHECK_SLACK,
        mean_value_bound,
        mean_value_ok: gap <= mean_value_bound + CHECK_SLACK,
    }
}

/// A `c3` between `c1` and `c2` with `m(c1) − m(c2) = Var(c3)(c1 − c2)`, found
/// by bisection on a sign change over the discretized segment.
pub fn mean_value_point(c1: f64, c2: f64) -> Option<f64> {
    if c1 == c2 {
        return Some(c1);
    }
    let slope = (reward::mean(c1) - reward::mean(c2)) / (c1 - c2);
    let g = |c: f64| reward::variance(c) - slope;
    let at = |i: usize| c1 + (c2 - c1) * i as f64 / (SEGMENT_POINTS - 1) as f64;
    let (mut lo, mut hi) = (0..SEGMENT_POINTS - 1)
        .map(|i| (at(i), at(i + 1)))
        .find(|&(x, y)| g(x) * g(y) <= 0.0)?;
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if g(lo) * g(mid) <= 0.0 {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Some(0.5 * (lo + hi))
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SweepSummary {
    pub instances: usize,
    pub violations: usize,
    pub lower_violations: usize,
    pub worst_excess: f64,
}

/// `θ` with `‖θ‖_𝔸 ≤ radius` on the free coordinates of `template`; frozen
/// coordinates keep their template values.
pub fn sample_in_ball<R: Rng + ?Sized>(
    model: &BefModel,
    template: &ParamVector,
    radius: f64,
    on_sphere: bool,
    rng: &mut R,
) -> DVector<f64> {
    let free = template.free_indices();
    let k = free.len();
    let mut theta = template.theta.clone();
    if k == 0 {
        return theta;
    }
    let a_free = DMatrix::from_fn(k, k, |i, j| model.trace_gram()[(free[i], free[j])]);
    let chol = a_free
        .cholesky()
        .expect("principal submatrix of an SPD matrix is SPD");
    let z = DVector::from_iterator(k, (0..k).map(|_| rng.sample::<f64, _>(StandardNormal)));
    let u = &z / z.norm().max(f64::MIN_POSITIVE);
    let r = if on_sphere {
        radius
    } else {
        radius * rng.random::<f64>().powf(1.0 / k as f64)
    };
    // ‖L⁻ᵀu‖²_𝔸 = uᵀ L⁻¹ L Lᵀ L⁻ᵀ u = ‖u‖²
    let step = chol
        .l_dirty()
        .tr_solve_lower_triangular(&(u * r))
        .expect("positive diagonal");
    for (i, &j) in free.iter().enumerate() {
        theta[j] = step[i];
    }
    theta
}

/// Random `(θ1, θ2, s, a, f)` instances of both transportation inequalities.
pub fn transportation_sweep<R: Rng + ?Sized>(
    model: &BefModel,
    template: &ParamVector,
    radius: f64,
    instances: usize,
    rng: &mut R,
) -> Result<SweepSummary> {
    let mut out = SweepSummary::default();
    let grid = model.grid();
    for _ in 0..instances {
        let t1 = sample_in_ball(model, template, radius, false, rng);
        let t2 = sample_in_ball(model, template, radius, false, rng);
        let s = grid.points[rng.random_range(0..grid.len())];
        let a = rng.random_range(0..model.n_actions());
        let scale = rng.random_range(0.1..10.0);
        let f: Vec<f64> = (0..grid.len())
            .map(|_| scale * rng.random::<f64>())
            .collect();
        let check = check_transportation(model, &t1, &t2, s, a, &f)?;
        out.instances += 1;
        if !check.ok {
            out.violations += 1;
        }
        if !check.ok_lower {
            out.lower_violations += 1;
        }
        let excess = (check.lhs - check.rhs).max(check.lhs_lower - check.rhs_lower);
        out.worst_excess = out.worst_excess.max(excess);
    }
    Ok(out)
}

/// Random instances of the reward transportation bound; `lower_violations`
/// counts failures of the exact mean-value form.
pub fn reward_transportation_sweep<R: Rng + ?Sized>(
    model: &BefModel,
    template: &ParamVector,
    radius: f64,
    instances: usize,
    rng: &mut R,
) -> SweepSummary {
    let mut out = SweepSummary::default();
    let grid = model.grid();
    for _ in 0..instances {
        let t1 = sample_in_ball(model, template, radius, false, rng);
        let t2 = sample_in_ball(model, template, radius, false, rng);
        let s = grid.points[rng.random_range(0..grid.len())];
        let a = rng.random_range(0..model.n_actions());
        let check = check_reward_transportation(model, &t1, &t2, s, a);
        out.instances += 1;
        if !check.ok {
            out.violations += 1;
        }
        if !check.mean_value_ok {
            out.lower_violations += 1;
        }
        out.worst_excess = out.worst_excess.max(check.gap - check.bound);
    }
    out
}

/// Where an extremal curvature was observed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Witness {
    pub value: f64,
    pub s: f64,
    pub a: usize,
    pub theta: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConstantsEstimate {
    pub alpha_p: Witness,
    pub beta_p: Witness,
    pub alpha_r: Witness,
    pub beta_r: Witness,
    pub samples: usize,
}

impl ConstantsEstimate {
    pub fn to_constants(&self, model: &BefModel, eta: f64, b_a: f64) -> ModelConstants {
        ModelConstants {
            alpha_p: self.alpha_p.value,
            beta_p: self.beta_p.value,
            alpha_r: self.alpha_r.value,
            beta_r: self.beta_r.value,
            eta,
            b_a,
            b_phi_a: model.b_phi_a(),
        }
    }
}

/// Orthonormal basis of `span{ψ(s') − ψ(s'_0)}`: the directions in which the
/// transition law can vary.
fn identifiable_basis(model: &BefModel) -> DMatrix<f64> {
    let psi = model.psi_grid();
    let n = psi.nrows();
    let diffs = DMatrix::from_fn(model.p(), n.saturating_sub(1), |i, j| {
        psi[(j + 1, i)] - psi[(0, i)]
    });
    if diffs.ncols() == 0 {
        return DMatrix::zeros(model.p(), 0);
    }
    let gram = &diffs * diffs.transpose();
    let eig = SymmetricEigen::new(gram);
    let top = eig.eigenvalues.max().max(f64::MIN_POSITIVE);
    let keep: Vec<usize> = (0..eig.eigenvalues.len())
        .filter(|&i| eig.eigenvalues[i] > 1e-10 * top)
        .collect();
    DMatrix::from_fn(model.p(), keep.len(), |i, j| eig.eigenvectors[(i, keep[j])])
}

/// Sampled extremes of the curvature of both log-partitions over the grid
/// and over `θ` in the `‖·‖_𝔸` ball of radius `b_a` (free coordinates only).
pub fn estimate_constants<R: Rng + ?Sized>(
    model: &BefModel,
    template_p: &ParamVector,
    template_r: &ParamVector,
    b_a: f64,
    samples: usize,
    rng: &mut R,
) -> Result<ConstantsEstimate> {
    let u = identifiable_basis(model);
    if u.ncols() == 0 {
        return Err(Error::InvalidModel(
            "next-state features are constant".into(),
        ));
    }
    let mut thetas_p = vec![ParamVector::zeros(model.d()).theta];
    let mut thetas_r = thetas_p.clone();
    for (i, t) in template_p.theta.iter().enumerate() {
        if template_p.is_frozen(i) {
            thetas_p[0][i] = *t;
        }
    }
    for (i, t) in template_r.theta.iter().enumerate() {
        if template_r.is_frozen(i) {
            thetas_r[0][i] = *t;
        }
    }
    for j in 0..samples {
        thetas_p.push(sample_in_ball(model, template_p, b_a, j % 2 == 0, rng));
        thetas_r.push(sample_in_ball(model, template_r, b_a, j % 2 == 0, rng));
    }

    let witness = |value, s, a, theta: &DVector<f64>| Witness {
        value,
        s,
        a,
        theta: theta.iter().copied().collect(),
    };
    let mut alpha_p: Option<Witness> = None;
    let mut beta_p: Option<Witness> = None;
    let mut alpha_r: Option<Witness> = None;
    let mut beta_r: Option<Witness> = None;
    let b_sq = model.b().norm_squared();
    for &s in &model.grid().points {
        for a in 0..model.n_actions() {
            for theta in &thetas_p {
                let dist = model.next_state_dist(theta, s, a)?;
                let c = u.transpose() * dist.cov_psi(model.psi_grid()) * &u;
                let eig = SymmetricEigen::new(c).eigenvalues;
                let (lo, hi) = (eig.min(), eig.max());
                if alpha_p.as_ref().is_none_or(|w| lo < w.value) {
                    alpha_p = Some(witness(lo, s, a, theta));
                }
                if beta_p.as_ref().is_none_or(|w| hi > w.value) {
                    beta_p = Some(witness(hi, s, a, theta));
                }
            }
            for theta in &thetas_r {
                let v = model.reward_variance(theta, s, a) * b_sq;
                if alpha_r.as_ref().is_none_or(|w| v < w.value) {
                    alpha_r = Some(witness(v, s, a, theta));
                }
                if beta_r.as_ref().is_none_or(|w| v > w.value) {
                    beta_r = Some(witness(v, s, a, theta));
                }
            }
        }
    }
    let estimate = ConstantsEstimate {
        alpha_p: alpha_p.expect("grid and actions are nonempty"),
        beta_p: beta_p.expect("grid and actions are nonempty"),
        alpha_r: alpha_r.expect("grid and actions are nonempty"),
        beta_r: beta_r.expect("grid and actions are nonempty"),
        samples: thetas_p.len(),
    };
    for (label, w) in [
        ("alpha_p", &estimate.alpha_p),
        ("alpha_r", &estimate.alpha_r),
    ] {
        if w.value <= MIN_ALPHA {
            return Err(Error::InvalidModel(format!(
                "degenerate curvature: {label} = {:.3e} at s = {}, a = {}",
                w.value, w.s, w.a
            )));
        }
    }
    Ok(estimate)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoverageResult {
    pub delta: f64,
    pub family: Family,
    /// Episode boundaries checked.
    pub checks: usize,
    /// Boundaries where `‖θ − θ̂‖²_Ḡ` exceeded the radius.
    pub violations: usize,
    /// Largest ratio `‖θ − θ̂‖²_Ḡ / radius` seen.
    pub worst_ratio: f64,
}

impl CoverageResult {
    pub fn violated(&self) -> bool {
        self.violations > 0
    }
}

/// Refits both estimators at every episode boundary of `history` and checks
/// the true parameters against the confidence ellipsoids for each `δ`.
pub fn coverage_check(
    model: &BefModel,
    truth: (&ParamVector, &ParamVector),
    constants: &ModelConstants,
    horizon: usize,
    history: &History,
    mle: &MleConfig,
    deltas: &[f64],
) -> Result<Vec<CoverageResult>> {
    let d = model.d();
    let confidence: Vec<ConfidenceConstants> = deltas
        .iter()
        .map(|&delta| ConfidenceConstants::new(constants.clone(), d, horizon, delta))
        .collect::<Result<_>>()?;
    let mut gram_p = GramAccumulator::new(model, constants.eta, constants.alpha_p)?;
    let mut gram_r = GramAccumulator::new(model, constants.eta, constants.alpha_r)?;
    let cold = |truth: &ParamVector| {
        let mut p = ParamVector::zeros(d).with_frozen(truth.frozen.clone());
        for i in 0..d {
            if truth.is_frozen(i) {
                p.theta[i] = truth.theta[i];
            }
        }
        p
    };
    let mut hat_p = cold(truth.0);
    let mut hat_r = cold(truth.1);
    let mut results: Vec<CoverageResult> = deltas
        .iter()
        .flat_map(|&delta| {
            [Family::Transition, Family::Reward].map(|family| CoverageResult {
                delta,
                family,
                checks: 0,
                violations: 0,
                worst_ratio: 0.0,
            })
        })
        .collect();
    let mut seen = 0;
    for (k, episode) in episodes(history).into_iter().enumerate() {
        for t in episode {
            gram_p.update(model, t.s, t.a)?;
            gram_r.update(model, t.s, t.a)?;
        }
        seen += episode.len();
        let data = &history.transitions[..seen];
        hat_p = fit_transition_mle(model, data, mle, &hat_p)?.param;
        hat_r = fit_reward_mle(model, data, mle, &hat_r)?.param;
        let err_p = gram_p.norm_sq(&(&truth.0.theta - &hat_p.theta));
        let err_r = gram_r.norm_sq(&(&truth.1.theta - &hat_r.theta));
        for (result, conf) in results.chunks_mut(2).zip(&confidence) {
            for (r, err) in result.iter_mut().zip([err_p, err_r]) {
                let ratio = err / conf.radius(r.family, k + 1);
                r.checks += 1;
                r.worst_ratio = r.worst_ratio.max(ratio);
                if ratio > 1.0 {
                    r.violations += 1;
                }
            }
        }
    }
    Ok(results)
}

/// Fraction of episodes flagged optimistic.
pub fn optimism_rate(records: &[RegretRecord]) -> f64 {
    if records.is_empty() {
        return 0.0;
    }
    records.iter().filter(|r| r.optimism).count() as f64 / records.len() as f64
}

/// Empirical quantile of `‖ξ_k‖_Ḡ / √(x_k d log(d/δ))`: the smallest constant
/// `c` that would have covered that fraction of the draws.
pub fn noise_quantile_ratio(records: &[RegretRecord], d: usize, delta: f64, q: f64) -> Option<f64> {
    let mut ratios: Vec<f64> = records
        .iter()
        .filter(|r| r.x_k > 0.0)
        .map(|r| r.noise_norm / crate::exploration::concentration_bound(r.x_k, d, delta, 1.0))
        .filter(|r| r.is_finite())
        .collect();
    if ratios.is_empty() {
        return None;
    }
    ratios.sort_by(f64::total_cmp);
    let idx = ((q * ratios.len() as f64).ceil() as usize).clamp(1, ratios.len()) - 1;
    Some(ratios[idx])
}

/// Fraction of perturbed episodes with `‖ξ_k‖_Ḡ ≤ c √(x_k d log(d/δ))`.
pub fn noise_within_bound(records: &[RegretRecord], d: usize, delta: f64, c: f64) -> Option<f64> {
    let perturbed: Vec<&RegretRecord> = records.iter().filter(|r| r.x_k > 0.0).collect();
    if perturbed.is_empty() {
        return None;
    }
    let inside = perturbed
        .iter()
        .filter(|r| r.noise_norm <= crate::exploration::concentration_bound(r.x_k, d, delta, c))
        .count();
    Some(inside as f64 / perturbed.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticReport {
    pub bad_rounds: BadRoundReport,
    pub elliptical_sum: EllipticalSumReport,
    pub coverage: Vec<CoverageResult>,
    pub transportation: SweepSummary,
    pub reward_transportation: SweepSummary,
    pub optimism_rate: f64,
    pub noise_quantile_ratio: Option<f64>,
    /// Uses the run's `concentration_constant`.
    pub noise_within_bound: Option<f64>,
    pub constants: ConstantsEstimate,
}
