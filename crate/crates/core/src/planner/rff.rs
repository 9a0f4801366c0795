//! Random Fourier features for the unit RBF kernel and the factored
//! next-state expectation they enable.
//!
//! For any positive scales `λ` and shift `c`, with `x = λ⊙ψ(s') + c` and
//! `y = m/λ` (`m = M_θ φ(s, a)`),
//!
//! ```text
//! ψᵀm = xᵀy − cᵀy,   exp(xᵀy) = k(x, y) · exp(‖x‖²/2) · exp(‖y‖²/2)
//! ```
//!
//! so `E[V(s')] = exp(‖y‖²/2 − cᵀy − Z) ∫ exp(‖x‖²/2) V k(x, y)`. The integral
//! only couples `(s, a)` to `s'` through the kernel, which is replaced by
//! `z(x)ᵀz(y)`. The kernel error is amplified by `E_P[exp(‖x − y‖²/2)]`;
//! `λ, c` are chosen to keep that factor small.
//!
//! Next-state masses sum to one, so `E[V] = v̄ + E[V − v̄]`; only the centered
//! part goes through the features, with `v̄` the midrange of `V`.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::model::{BefModel, NextStateDist};
use crate::numerics::log_sum_exp;

/// `exp(−‖x − y‖²/2)`.
pub fn rbf_kernel(x: &DVector<f64>, y: &DVector<f64>) -> f64 {
    (-0.5 * (x - y).norm_squared()).exp()
}

#[derive(Clone, Debug)]
pub struct RffBasis {
    /// `N × p` frequencies, rows drawn from `N(0, I_p)`.
    w: DMatrix<f64>,
    /// Phases drawn from `U[0, 2π]`.
    b: DVector<f64>,
    seed: Option<u64>,
}

impl RffBasis {
    pub fn sample<R: Rng + ?Sized>(p: usize, n: usize, rng: &mut R) -> RffBasis {
        assert!(n >= 1, "need at least one feature");
        let w = DMatrix::from_fn(n, p, |_, _| rng.sample::<f64, _>(StandardNormal));
        let b = DVector::from_fn(n, |_, _| rng.random_range(0.0..std::f64::consts::TAU));
        RffBasis { w, b, seed: None }
    }

    pub fn from_seed(p: usize, n: usize, seed: u64) -> RffBasis {
        let mut basis = RffBasis::sample(p, n, &mut ChaCha8Rng::seed_from_u64(seed));
        basis.seed = Some(seed);
        basis
    }

    pub fn seed(&self) -> Option<u64> {
        self.seed
    }

    pub fn n_features(&self) -> usize {
        self.w.nrows()
    }

    pub fn dim(&self) -> usize {
        self.w.ncols()
    }

    /// `z(x) = √(2/N) cos(Wx + b)`.
    pub fn features(&self, x: &DVector<f64>) -> DVector<f64> {
        let scale = (2.0 / self.n_features() as f64).sqrt();
        let mut z = &self.w * x + &self.b;
        z.apply(|v| *v = scale * v.cos());
        z
    }

    /// Features of many points at once, one row per point.
    pub fn feature_rows(&self, points: &[DVector<f64>]) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(points.len(), self.n_features());
        for (i, x) in points.iter().enumerate() {
            out.row_mut(i).copy_from(&self.features(x).transpose());
        }
        out
    }

    /// `z(x)ᵀz(y)`, the Monte Carlo estimate of `rbf_kernel(x, y)`.
    pub fn kernel(&self, x: &DVector<f64>, y: &DVector<f64>) -> f64 {
        self.features(x).dot(&self.features(y))
    }
}

/// Per-coordinate affine reparameterization `x = λ⊙ψ + c`, `y = m/λ`.
#[derive(Clone, Debug, PartialEq)]
pub struct Conditioning {
    pub scale: DVector<f64>,
    pub shift: DVector<f64>,
}

const GOLDEN_ITERS: usize = 24;
const SWEEPS: usize = 3;
const LOG_SCALE_RANGE: (f64, f64) = (-6.0, 4.0);

fn golden_min(mut lo: f64, mut hi: f64, f: &mut dyn FnMut(f64) -> f64) -> (f64, f64) {
    let r = 0.5 * (5f64.sqrt() - 1.0);
    let mut x1 = hi - r * (hi - lo);
    let mut x2 = lo + r * (hi - lo);
    let (mut f1, mut f2) = (f(x1), f(x2));
    for _ in 0..GOLDEN_ITERS {
        if f1 <= f2 {
            hi = x2;
            x2 = x1;
            f2 = f1;
            x1 = hi - r * (hi - lo);
            f1 = f(x1);
        } else {
            lo = x1;
            x1 = x2;
            f1 = f2;
            x2 = lo + r * (hi - lo);
            f2 = f(x2);
        }
    }
    if f1 <= f2 {
        (x1, f1)
    } else {
        (x2, f2)
    }
}

impl Conditioning {
    pub fn identity(p: usize) -> Conditioning {
        Conditioning {
            scale: DVector::from_element(p, 1.0),
            shift: DVector::zeros(p),
        }
    }

    pub fn transform_psi(&self, psi: &DVector<f64>) -> DVector<f64> {
        psi.component_mul(&self.scale) + &self.shift
    }

    pub fn transform_natural(&self, natural: &DVector<f64>) -> DVector<f64> {
        natural.component_div(&self.scale)
    }

    /// `max_{s,a} log E_P[exp(‖x − y‖²/2)]` over the given laws.
    pub fn log_amplification(
        &self,
        psi_grid: &DMatrix<f64>,
        laws: &[(DVector<f64>, NextStateDist)],
    ) -> f64 {
        amplification(&self.scale, &self.shift, psi_grid, laws)
    }

    /// Coordinate descent on `(log λ_j, c_j)`; each `c_j` search is convex.
    pub fn optimize(model: &BefModel, laws: &[(DVector<f64>, NextStateDist)]) -> Conditioning {
        let psi = model.psi_grid();
        let p = model.p();
        let mut scale = vec![1.0; p];
        let mut shift = vec![0.0; p];
        if laws.is_empty() {
            return Conditioning::identity(p);
        }
        let data = AmplificationData::new(psi, laws);
        let mut terms = Vec::with_capacity(psi.nrows());
        let col_range = |j: usize| {
            psi.column(j)
                .iter()
                .fold((f64::MAX, f64::MIN), |(lo, hi), &v| (lo.min(v), hi.max(v)))
        };
        let nat_range = |j: usize| {
            laws.iter().fold((f64::MAX, f64::MIN), |(lo, hi), (m, _)| {
                (lo.min(m[j]), hi.max(m[j]))
            })
        };
        let mut best = data.evaluate(&scale, &shift, &mut terms);
        for _ in 0..SWEEPS {
            for j in 0..p {
                let (psi_lo, psi_hi) = col_range(j);
                let (m_lo, m_hi) = nat_range(j);
                let mut trial_scale = scale.clone();
                let mut trial_shift = shift.clone();
                let mut best_shift_for = |lam: f64| {
                    trial_scale[j] = lam;
                    let lo = m_lo / lam - lam * psi_hi - 1.0;
                    let hi = m_hi / lam - lam * psi_lo + 1.0;
                    golden_min(lo, hi, &mut |c| {
                        trial_shift[j] = c;
                        data.evaluate(&trial_scale, &trial_shift, &mut terms)
                    })
                };
                let (log_lam, _) = golden_min(LOG_SCALE_RANGE.0, LOG_SCALE_RANGE.1, &mut |t| {
                    best_shift_for(t.exp()).1
                });
                let (c, value) = best_shift_for(log_lam.exp());
                if value < best {
                    best = value;
                    scale[j] = log_lam.exp();
                    shift[j] = c;
                }
            }
        }
        let (scale, shift) = (DVector::from_vec(scale), DVector::from_vec(shift));
        Conditioning { scale, shift }
    }
}

/// Laws flattened for repeated amplification evaluations.
struct AmplificationData {
    p: usize,
    /// Row-major `grid × p`.
    psi: Vec<f64>,
    naturals: Vec<Vec<f64>>,
    log_mass: Vec<Vec<f64>>,
}

impl AmplificationData {
    fn new(psi: &DMatrix<f64>, laws: &[(DVector<f64>, NextStateDist)]) -> AmplificationData {
        let p = psi.ncols();
        AmplificationData {
            p,
            psi: (0..psi.nrows())
                .flat_map(|j| (0..p).map(move |i| psi[(j, i)]))
                .collect(),
            naturals: laws.iter().map(|(m, _)| m.as_slice().to_vec()).collect(),
            log_mass: laws
                .iter()
                .map(|(_, d)| d.mass.iter().map(|w| w.ln()).collect())
                .collect(),
        }
    }

    fn evaluate(&self, scale: &[f64], shift: &[f64], terms: &mut Vec<f64>) -> f64 {
        let p = self.p;
        let x: Vec<f64> = self
            .psi
            .chunks_exact(p)
            .flat_map(|row| (0..p).map(move |i| scale[i] * row[i] + shift[i]))
            .collect();
        let mut y = vec![0.0; p];
        let mut worst = f64::NEG_INFINITY;
        for (m, log_mass) in self.naturals.iter().zip(&self.log_mass) {
            for i in 0..p {
                y[i] = m[i] / scale[i];
            }
            terms.clear();
            terms.extend(x.chunks_exact(p).zip(log_mass).map(|(xj, lw)| {
                let d2: f64 = xj.iter().zip(&y).map(|(a, b)| (a - b) * (a - b)).sum();
                lw + 0.5 * d2
            }));
            worst = worst.max(log_sum_exp(terms.iter().copied()));
        }
        worst
    }
}

fn amplification(
    scale: &DVector<f64>,
    shift: &DVector<f64>,
    psi: &DMatrix<f64>,
    laws: &[(DVector<f64>, NextStateDist)],
) -> f64 {
    AmplificationData::new(psi, laws).evaluate(scale.as_slice(), shift.as_slice(), &mut Vec::new())
}

/// Grid-side quantities shared by every `(s, a)`:
/// `x_j` and `log ω_j = log w_j + ‖x_j‖²/2 − K₀`.
#[derive(Clone, Debug)]
pub struct GridSide {
    pub x: Vec<DVector<f64>>,
    pub log_weight: Vec<f64>,
    /// `K₀ = max_j (log w_j + ‖x_j‖²/2)`, factored out to avoid overflow.
    pub k0: f64,
}

impl GridSide {
    pub fn new(model: &BefModel, cond: &Conditioning) -> GridSide {
        let grid = model.grid();
        let x: Vec<DVector<f64>> = (0..grid.len())
            .map(|j| cond.transform_psi(&model.psi_grid().row(j).transpose()))
            .collect();
        let raw: Vec<f64> = x
            .iter()
            .zip(&grid.weights)
            .map(|(x, w)| w.ln() + 0.5 * x.norm_squared())
            .collect();
        let k0 = raw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        GridSide {
            x,
            log_weight: raw.iter().map(|r| r - k0).collect(),
            k0,
        }
    }

    /// `g = Σ_j ω_j (V_j − v̄) z(x_j)`.
    pub fn cache(&self, basis: &RffBasis, v_next: &[f64]) -> ValueCache {
        let offset = value_offset(v_next);
        let mut g = DVector::zeros(basis.n_features());
        for ((x, lw), v) in self.x.iter().zip(&self.log_weight).zip(v_next) {
            if *v != offset {
                g.axpy(lw.exp() * (v - offset), &basis.features(x), 1.0);
            }
        }
        ValueCache { g, offset }
    }
}

/// Midrange of `v`, the constant removed before the features are applied.
pub fn value_offset(v: &[f64]) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    let (lo, hi) = v
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &x| {
            (lo.min(x), hi.max(x))
        });
    0.5 * (lo + hi)
}

/// Per-step cache of the centered next-step values.
#[derive(Clone, Debug)]
pub struct ValueCache {
    pub g: DVector<f64>,
    pub offset: f64,
}

/// `(y, log prefactor)` for one `(s, a)`: `y = m/λ` and
/// `‖y‖²/2 − cᵀy − Z + K₀`.
pub fn state_action_side(
    cond: &Conditioning,
    grid_side: &GridSide,
    natural: &DVector<f64>,
    log_partition: f64,
) -> (DVector<f64>, f64) {
    let y = cond.transform_natural(natural);
    let log_pref = 0.5 * y.norm_squared() - cond.shift.dot(&y) - log_partition + grid_side.k0;
    (y, log_pref)
}

/// Single-point factored expectation, RFF kernel.
#[allow(clippy::too_many_arguments)]
pub fn next_state_expectation_rff(
    model: &BefModel,
    theta_p: &DVector<f64>,
    basis: &RffBasis,
    cond: &Conditioning,
    grid_side: &GridSide,
    cache: &ValueCache,
    s: f64,
    a: usize,
) -> crate::Result<f64> {
    let natural = model.natural_param(theta_p, s, a);
    let z = model.dist_from_natural(&natural)?.log_partition;
    let (y, log_pref) = state_action_side(cond, grid_side, &natural, z);
    Ok(cache.offset + log_pref.exp() * basis.features(&y).dot(&cache.g))
}

/// Single-point factored expectation with the exact kernel in place of
/// `z(x)ᵀz(y)`; algebraically equal to the exact expectation.
pub fn next_state_expectation_kernel(
    model: &BefModel,
    theta_p: &DVector<f64>,
    cond: &Conditioning,
    grid_side: &GridSide,
    v_next: &[f64],
    s: f64,
    a: usize,
) -> crate::Result<f64> {
    let natural = model.natural_param(theta_p, s, a);
    let z = model.dist_from_natural(&natural)?.log_partition;
    let (y, log_pref) = state_action_side(cond, grid_side, &natural, z);
    let offset = value_offset(v_next);
    let integral: f64 = grid_side
        .x
        .iter()
        .zip(&grid_side.log_weight)
        .zip(v_next)
        .map(|((x, lw), v)| (lw - 0.5 * (x - &y).norm_squared()).exp() * (v - offset))
        .sum();
    Ok(offset + log_pref.exp() * integral)
}
