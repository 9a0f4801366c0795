use serde::{Deserialize, Serialize};

use super::GramAccumulator;
use crate::error::{Error, Result};
use crate::model::{Family, ModelConstants};

/// Everything needed to evaluate `β^i(k, δ)` and the confidence radii.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceConstants {
    pub constants: ModelConstants,
    pub d: usize,
    pub horizon: usize,
    pub delta: f64,
}

impl ConfidenceConstants {
    pub fn new(constants: ModelConstants, d: usize, horizon: usize, delta: f64) -> Result<Self> {
        constants.validate()?;
        if !(delta > 0.0 && delta <= 1.0) {
            return Err(Error::InvalidConfig(format!(
                "delta must lie in (0, 1], got {delta}"
            )));
        }
        Ok(ConfidenceConstants {
            constants,
            d,
            horizon,
            delta,
        })
    }

    pub fn alpha(&self, family: Family) -> f64 {
        match family {
            Family::Transition => self.constants.alpha_p,
            Family::Reward => self.constants.alpha_r,
        }
    }

    /// Curvature upper bound `β^p` or `β^r`.
    pub fn smoothness(&self, family: Family) -> f64 {
        match family {
            Family::Transition => self.constants.beta_p,
            Family::Reward => self.constants.beta_r,
        }
    }

    /// `γ_k = d log(1 + (β/η) B_{φ,𝔸} H k)`.
    pub fn gamma(&self, family: Family, k: usize) -> f64 {
        let c = &self.constants;
        let growth = self.smoothness(family) / c.eta * c.b_phi_a * (self.horizon * k) as f64;
        self.d as f64 * growth.ln_1p()
    }

    /// `β(k, δ) = (η/2)B_𝔸² + γ_k + log(1/δ)`.
    pub fn beta(&self, family: Family, k: usize) -> f64 {
        let c = &self.constants;
        0.5 * c.eta * c.b_a * c.b_a + self.gamma(family, k) - self.delta.ln()
    }

    /// Squared radius of `{θ : ‖θ − θ̂‖²_Ḡ ≤ (2/α) β(k, δ)}`.
    pub fn radius(&self, family: Family, k: usize) -> f64 {
        2.0 / self.alpha(family) * self.beta(family, k)
    }

    /// Data-dependent radius with `γ_k` replaced by `log det(I + (β/η) 𝔸⁻¹ ΣG)`.
    pub fn log_det_radius(&self, family: Family, gram: &GramAccumulator) -> Result<f64> {
        let c = &self.constants;
        let trace_gram = gram.regularizer() * (self.alpha(family) / c.eta);
        let scaled = &trace_gram + gram.accumulated() * (self.smoothness(family) / c.eta);
        let log_det = |m: nalgebra::DMatrix<f64>| -> Result<f64> {
            let chol = m
                .cholesky()
                .ok_or(Error::NotPositiveDefinite("trace Gram"))?;
            Ok(2.0
                * chol
                    .l_dirty()
                    .diagonal()
                    .iter()
                    .map(|x| x.ln())
                    .sum::<f64>())
        };
        let info = log_det(scaled)? - log_det(trace_gram)?;
        Ok(2.0 / self.alpha(family) * (0.5 * c.eta * c.b_a * c.b_a + info - self.delta.ln()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn constants(b_a: f64) -> ModelConstants {
        ModelConstants {
            alpha_p: 0.1,
            beta_p: 1.0,
            alpha_r: 0.05,
            beta_r: 0.25,
            eta: 1.0,
            b_a,
            b_phi_a: 1.0,
        }
    }

    #[test]
    fn degenerate_constants_give_zero_radius() {
        let c = ConfidenceConstants::new(constants(0.0), 8, 5, 1.0).unwrap();
        assert_eq!(c.radius(Family::Transition, 0), 0.0);
    }

    #[test]
    fn closed_form_value() {
        let c = ConfidenceConstants::new(constants(1.0), 8, 5, 0.05).unwrap();
        // independent evaluation of 2/α (η/2 B² + d ln(1 + β/η B_φ H K) + ln(1/δ))
        let gamma = 8.0 * (1.0f64 + 1.0 * 1.0 * 5.0 * 100.0).ln();
        let expected = 2.0 / 0.1 * (0.5 + gamma + (1.0f64 / 0.05).ln());
        assert!((c.radius(Family::Transition, 100) - expected).abs() < 1e-12 * expected);
        assert!((expected - 1_064.571_622).abs() < 1e-5);
    }

    #[test]
    fn monotone_in_k_and_inverse_delta() {
        let loose = ConfidenceConstants::new(constants(1.0), 4, 3, 0.2).unwrap();
        let tight = ConfidenceConstants::new(constants(1.0), 4, 3, 0.01).unwrap();
        for fam in [Family::Transition, Family::Reward] {
            let mut prev = 0.0;
            for k in 0..50 {
                let r = loose.radius(fam, k);
                assert!(r >= prev);
                assert!(tight.radius(fam, k) > r);
                prev = r;
            }
        }
    }
}
