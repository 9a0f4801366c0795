//! Transition-family math: log-partition, moments of ψ, KL and sampling.

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use super::BefModel;
use crate::error::{Error, Result};
use crate::numerics::log_sum_exp;

/// The next-state law at one `(s, a)`, discretized on the model grid.
#[derive(Clone, Debug)]
pub struct NextStateDist {
    pub log_partition: f64,
    /// Probability mass carried by each grid node (quadrature weight included).
    pub mass: Vec<f64>,
}

impl NextStateDist {
    /// `E[f(s')]` for `f` given on the grid.
    pub fn expectation(&self, values: &[f64]) -> f64 {
        self.mass.iter().zip(values).map(|(m, v)| m * v).sum()
    }

    /// `(E[f], Var[f])` for `f` given on the grid.
    pub fn mean_var(&self, values: &[f64]) -> (f64, f64) {
        let mean = self.expectation(values);
        let var = self
            .mass
            .iter()
            .zip(values)
            .map(|(m, v)| m * (v - mean).powi(2))
            .sum();
        (mean, var)
    }

    pub fn mean_psi(&self, psi_grid: &DMatrix<f64>) -> DVector<f64> {
        let mut mean = DVector::zeros(psi_grid.ncols());
        for (j, &m) in self.mass.iter().enumerate() {
            if m > 0.0 {
                mean.axpy(m, &psi_grid.row(j).transpose(), 1.0);
            }
        }
        mean
    }

    /// Covariance of ψ(s'), accumulated around the mean for accuracy.
    pub fn cov_psi(&self, psi_grid: &DMatrix<f64>) -> DMatrix<f64> {
        let mean = self.mean_psi(psi_grid);
        let p = psi_grid.ncols();
        let mut cov = DMatrix::zeros(p, p);
        for (j, &m) in self.mass.iter().enumerate() {
            if m > 0.0 {
                let centered = psi_grid.row(j).transpose() - &mean;
                cov.syger(m, &centered, &centered, 1.0);
            }
        }
        cov.fill_upper_triangle_with_lower_triangle();
        cov
    }

    /// Index of the grid node drawn by inverse CDF.
    pub fn sample_index<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        for (j, &m) in self.mass.iter().enumerate() {
            acc += m;
            if u < acc {
                return j;
            }
        }
        // rounding left u above the total; fall back to the last node with mass
        self.mass.iter().rposition(|&m| m > 0.0).unwrap_or(0)
    }
}

impl BefModel {
    /// Next-state law for a given natural parameter `η = M_θ φ(s, a)`.
    pub fn dist_from_natural(&self, natural: &DVector<f64>) -> Result<NextStateDist> {
        let grid = self.grid();
        let logits: Vec<f64> = (0..grid.len())
            .map(|j| self.psi_grid().row(j).dot(&natural.transpose()) + grid.weights[j].ln())
            .collect();
        let log_partition = log_sum_exp(logits.iter().copied());
        if !log_partition.is_finite() {
            return Err(Error::NonFinite("transition log-partition"));
        }
        let mass = logits.iter().map(|l| (l - log_partition).exp()).collect();
        Ok(NextStateDist {
            log_partition,
            mass,
        })
    }

    pub fn next_state_dist(&self, theta: &DVector<f64>, s: f64, a: usize) -> Result<NextStateDist> {
        self.dist_from_natural(&self.natural_param(theta, s, a))
    }

    /// `Z^p_{s,a}(θ) = log ∫ exp(ψ(s')ᵀ M_θ φ(s, a)) ds'`.
    pub fn log_partition_p(&self, theta: &DVector<f64>, s: f64, a: usize) -> Result<f64> {
        Ok(self.next_state_dist(theta, s, a)?.log_partition)
    }

    /// Log-density of `s_next`; on intervals it is a density w.r.t. Lebesgue measure.
    pub fn log_density_p(
        &self,
        theta: &DVector<f64>,
        s: f64,
        a: usize,
        s_next: f64,
    ) -> Result<f64> {
        let natural = self.natural_param(theta, s, a);
        let z = self.dist_from_natural(&natural)?.log_partition;
        Ok(self.psi(s_next).dot(&natural) - z)
    }

    /// `∇Z = Φᵀ E[ψ(s')]` where `Φ` is the feature block.
    pub fn grad_log_partition_p(
        &self,
        theta: &DVector<f64>,
        s: f64,
        a: usize,
    ) -> Result<DVector<f64>> {
        let block = self.feature_block(s, a);
        let dist = self.dist_from_natural(&(&block * theta))?;
        Ok(block.transpose() * dist.mean_psi(self.psi_grid()))
    }

    /// `∇²Z = Φᵀ ℂ[ψ(s')] Φ`.
    pub fn hessian_log_partition_p(
        &self,
        theta: &DVector<f64>,
        s: f64,
        a: usize,
    ) -> Result<DMatrix<f64>> {
        let block = self.feature_block(s, a);
        let dist = self.dist_from_natural(&(&block * theta))?;
        let cov = dist.cov_psi(self.psi_grid());
        let h = block.transpose() * cov * &block;
        Ok(0.5 * (&h + h.transpose()))
    }

    /// `KL(P_θ1 ‖ P_θ2) = (θ1 − θ2)ᵀ∇Z(θ1) − Z(θ1) + Z(θ2)`.
    pub fn kl_p(
        &self,
        theta1: &DVector<f64>,
        theta2: &DVector<f64>,
        s: f64,
        a: usize,
    ) -> Result<f64> {
        let block = self.feature_block(s, a);
        let eta1 = &block * theta1;
        let eta2 = &block * theta2;
        let d1 = self.dist_from_natural(&eta1)?;
        let d2 = self.dist_from_natural(&eta2)?;
        let mean = d1.mean_psi(self.psi_grid());
        Ok((eta1 - eta2).dot(&mean) - d1.log_partition + d2.log_partition)
    }

    /// Draws `s' ~ P_θ(· | s, a)`. Interval draws are uniform inside the
    /// quadrature cell picked by inverse CDF.
    pub fn sample_next_state<R: Rng + ?Sized>(
        &self,
        theta: &DVector<f64>,
        s: f64,
        a: usize,
        rng: &mut R,
    ) -> Result<f64> {
        let dist = self.next_state_dist(theta, s, a)?;
        Ok(self.sample_from(&dist, rng))
    }

    pub fn sample_from<R: Rng + ?Sized>(&self, dist: &NextStateDist, rng: &mut R) -> f64 {
        let j = dist.sample_index(rng);
        let grid = self.grid();
        if self.state_space().is_finite() {
            grid.points[j]
        } else {
            let (lo, hi) = (grid.edges[j], grid.edges[j + 1]);
            lo + (hi - lo) * rng.random::<f64>()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{PhiMap, PsiMap, StateSpace};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Two states, one action, ψ and φ one-hot, one parameter per entry of M.
    fn two_state() -> BefModel {
        let a = (0..2)
            .flat_map(|i| (0..2).map(move |j| (i, j)))
            .map(|(i, j)| {
                let mut m = DMatrix::zeros(2, 2);
                m[(i, j)] = 1.0;
                m
            })
            .collect();
        BefModel::new(
            StateSpace::Finite { count: 2 },
            vec!["stay".into()],
            PsiMap::OneHot,
            PhiMap::OneHot,
            a,
            DVector::from_vec(vec![1.0, 1.0]),
        )
        .unwrap()
    }

    /// Logit of next state `i` from state 0 is `theta[2 i]`.
    fn logits(l0: f64, l1: f64) -> DVector<f64> {
        DVector::from_vec(vec![l0, 0.0, l1, 0.0])
    }

    #[test]
    fn zero_parameter_gives_log_count() {
        let m = two_state();
        let z = m.log_partition_p(&DVector::zeros(4), 0.0, 0).unwrap();
        assert!((z - 2f64.ln()).abs() < 1e-15);
        let ld = m.log_density_p(&DVector::zeros(4), 0.0, 0, 1.0).unwrap();
        assert!((ld - 0.5f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn two_term_partition_and_density() {
        let m = two_state();
        let th = logits(1.0, 0.0);
        let z = m.log_partition_p(&th, 0.0, 0).unwrap();
        assert!((z - (1f64.exp() + 1.0).ln()).abs() < 1e-14);
        let ld = m.log_density_p(&th, 0.0, 0, 0.0).unwrap();
        assert!((ld - (1.0 - (1f64.exp() + 1.0).ln())).abs() < 1e-14);
        let total: f64 = (0..2)
            .map(|s| m.log_density_p(&th, 0.0, 0, s as f64).unwrap().exp())
            .sum();
        assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn kl_matches_brute_force() {
        let m = two_state();
        let (t1, t2) = (logits(1.0, 0.0), DVector::zeros(4));
        let p1 = [1f64.exp() / (1f64.exp() + 1.0), 1.0 / (1f64.exp() + 1.0)];
        let brute: f64 = p1.iter().map(|p| p * (p / 0.5).ln()).sum();
        let kl = m.kl_p(&t1, &t2, 0.0, 0).unwrap();
        assert!((kl - brute).abs() < 1e-12);
        assert_eq!(m.kl_p(&t1, &t1, 0.0, 0).unwrap(), 0.0);
    }

    #[test]
    fn gradient_at_zero_is_uniform_on_matching_column() {
        let m = two_state();
        let g = m.grad_log_partition_p(&DVector::zeros(4), 1.0, 0).unwrap();
        // column (s=1, a=0) is index 1; parameters (i, 1) sit at 1 and 3
        assert_eq!(g.as_slice(), &[0.0, 0.5, 0.0, 0.5]);
    }

    #[test]
    fn point_mass_has_zero_hessian_and_fixed_samples() {
        let m = two_state();
        let th = logits(-800.0, 0.0);
        let h = m.hessian_log_partition_p(&th, 0.0, 0).unwrap();
        assert!(h.amax() < 1e-300);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            assert_eq!(m.sample_next_state(&th, 0.0, 0, &mut rng).unwrap(), 1.0);
        }
    }

    #[test]
    fn uniform_sampling_frequency() {
        let m = two_state();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 100_000;
        let zeros = (0..n)
            .filter(|_| {
                m.sample_next_state(&DVector::zeros(4), 0.0, 0, &mut rng)
                    .unwrap()
                    == 0.0
            })
            .count();
        assert!((zeros as f64 / n as f64 - 0.5).abs() < 0.01);
    }
}
