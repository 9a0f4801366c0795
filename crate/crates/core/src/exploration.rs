//! Gaussian reward perturbation `ξ_k ~ N(0, x_k Ḡ_k⁻¹)`.

use nalgebra::DVector;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimation::{ConfidenceConstants, GramAccumulator};
use crate::model::Family;

/// `1/(4√(eπ))`, a lower bound on `Φ(−1)` and hence on the optimism probability.
pub fn optimism_floor() -> f64 {
    1.0 / (4.0 * (std::f64::consts::E * std::f64::consts::PI).sqrt())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "kebab-case", deny_unknown_fields)]
pub enum NoiseConfig {
    Theoretical,
    Scaled { factor: f64 },
}

impl NoiseConfig {
    pub fn validate(&self) -> Result<()> {
        match *self {
            NoiseConfig::Scaled { factor } if !(factor >= 0.0 && factor.is_finite()) => Err(
                Error::InvalidConfig(format!("noise factor must be nonnegative, got {factor}")),
            ),
            _ => Ok(()),
        }
    }

    fn factor(&self) -> f64 {
        match *self {
            NoiseConfig::Theoretical => 1.0,
            NoiseConfig::Scaled { factor } => factor,
        }
    }
}

/// `x_k = (H√(β^p β^p(k,δ)/(α^p α^r)) + √(β^r β^r(k,δ) min{1, α^p/α^r})/(2α^r))²`,
/// times the configured factor in scaled mode.
pub fn noise_scale(constants: &ConfidenceConstants, k: usize, config: &NoiseConfig) -> f64 {
    let c = &constants.constants;
    let h = constants.horizon as f64;
    let transition =
        h * (c.beta_p * constants.beta(Family::Transition, k) / (c.alpha_p * c.alpha_r)).sqrt();
    let reward = (c.beta_r * constants.beta(Family::Reward, k) * (c.alpha_p / c.alpha_r).min(1.0))
        .sqrt()
        / (2.0 * c.alpha_r);
    config.factor() * (transition + reward).powi(2)
}

/// `ξ = √x · L⁻ᵀ z` with `Ḡ = LLᵀ` and `z ~ N(0, I)`, so `Cov(ξ) = x Ḡ⁻¹`.
pub fn sample_perturbation<R: Rng + ?Sized>(
    gram: &GramAccumulator,
    x: f64,
    rng: &mut R,
) -> DVector<f64> {
    let d = gram.dim();
    let z = DVector::from_iterator(d, (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)));
    if x == 0.0 {
        return DVector::zeros(d);
    }
    let xi = gram
        .cholesky()
        .l_dirty()
        .tr_solve_lower_triangular(&z)
        .expect("Cholesky factor has a positive diagonal");
    xi * x.sqrt()
}

/// `c √(x d log(d/δ))`; the logarithm is clamped at zero when `δ ≥ d`.
pub fn concentration_bound(x: f64, d: usize, delta: f64, c: f64) -> f64 {
    let d = d as f64;
    c * (x * d * (d / delta).ln().max(0.0)).sqrt()
}
