//! Reward family on `[0, 1]` with uniform base measure:
//! `p(r) ∝ exp(c·r)` with `c = Bᵀ M_θ φ(s, a)`.

use nalgebra::DVector;
use rand::Rng;

use super::BefModel;

// Below this |c| the closed forms lose digits to cancellation; the truncated
// series are accurate to ~1e-17 there.
const SERIES_CUTOFF: f64 = 1e-2;

/// `log((e^c − 1)/c)`.
pub fn log_partition(c: f64) -> f64 {
    if c.abs() < SERIES_CUTOFF {
        let c2 = c * c;
        c / 2.0 + c2 / 24.0 - c2 * c2 / 2880.0 + c2 * c2 * c2 / 181_440.0
    } else if c > 0.0 {
        // e^c − 1 = e^c (1 − e^{−c})
        c + (-(-c).exp_m1()).ln() - c.ln()
    } else {
        ((-c.exp_m1()) / -c).ln()
    }
}

/// `E[r] = 1/(1 − e^{−c}) − 1/c`.
pub fn mean(c: f64) -> f64 {
    if c.abs() < SERIES_CUTOFF {
        let c2 = c * c;
        0.5 + c / 12.0 - c * c2 / 720.0 + c * c2 * c2 / 30_240.0 - c * c2 * c2 * c2 / 1_209_600.0
    } else {
        -1.0 / (-c).exp_m1() - 1.0 / c
    }
}

/// `Var[r] = 1/c² − e^c/(e^c − 1)²`.
pub fn variance(c: f64) -> f64 {
    if c.abs() < SERIES_CUTOFF {
        let c2 = c * c;
        1.0 / 12.0 - c2 / 240.0 + c2 * c2 / 6048.0 - c2 * c2 * c2 / 172_800.0
    } else {
        // e^c/(e^c − 1)² = 1/(4 sinh²(c/2)), stable for both signs
        let sh = (0.5 * c).sinh();
        1.0 / (c * c) - 1.0 / (4.0 * sh * sh)
    }
}

/// Inverse-CDF draw for uniform `u ∈ [0, 1)`.
pub fn quantile(c: f64, u: f64) -> f64 {
    let r = if c.abs() < 1e-12 {
        u
    } else if c > 0.0 {
        // r = 1 + log(u e^{−c} + 1 − u)/c avoids overflow of e^c
        1.0 + (u * (-c).exp() + (1.0 - u)).ln() / c
    } else {
        (u * c.exp_m1()).ln_1p() / c
    };
    r.clamp(0.0, 1.0)
}

impl BefModel {
    /// Scalar natural parameter `c = Bᵀ M_θ φ(s, a)` of the reward law.
    pub fn reward_natural(&self, theta_r: &DVector<f64>, s: f64, a: usize) -> f64 {
        self.b().dot(&self.natural_param(theta_r, s, a))
    }

    /// Gradient of `c` in θ: `(Bᵀ A_i φ(s, a))_i`.
    pub fn reward_direction(&self, s: f64, a: usize) -> DVector<f64> {
        self.feature_block(s, a).transpose() * self.b()
    }

    pub fn reward_log_partition(&self, theta_r: &DVector<f64>, s: f64, a: usize) -> f64 {
        log_partition(self.reward_natural(theta_r, s, a))
    }

    pub fn expected_reward(&self, theta_r: &DVector<f64>, s: f64, a: usize) -> f64 {
        mean(self.reward_natural(theta_r, s, a))
    }

    pub fn reward_variance(&self, theta_r: &DVector<f64>, s: f64, a: usize) -> f64 {
        variance(self.reward_natural(theta_r, s, a))
    }

    pub fn sample_reward<R: Rng + ?Sized>(
        &self,
        theta_r: &DVector<f64>,
        s: f64,
        a: usize,
        rng: &mut R,
    ) -> f64 {
        quantile(self.reward_natural(theta_r, s, a), rng.random())
    }
}
