//! Bellman backtracking: finite-horizon backward induction over the state grid.

pub mod rff;

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{BefModel, StateGrid};
use crate::numerics::argmax;

pub use rff::{Conditioning, GridSide, RffBasis, ValueCache};

/// How off-grid states of an interval space read values from the table.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Lookup {
    #[default]
    Nearest,
    Linear,
}

/// How `∫ P(s'|s,a) V(s') ds'` is evaluated.
#[derive(Clone, Copy, Debug)]
pub enum Backend<'a> {
    /// Direct sum or quadrature.
    Exact,
    /// Factored through random Fourier features.
    Rff(&'a RffBasis),
    /// The factored form with the exact kernel; a check on the RFF algebra.
    Kernel,
}

/// `Q_h` and `V_h` on the state grid for `h = 1..=H` (and `V_{H+1} = 0`).
#[derive(Clone, Debug)]
pub struct ValueTable {
    grid: StateGrid,
    finite: bool,
    lookup: Lookup,
    /// `q[h-1]` is `grid × actions`.
    q: Vec<DMatrix<f64>>,
    /// `v[h-1]` for `h = 1..=H+1`.
    v: Vec<DVector<f64>>,
    greedy: Vec<Vec<usize>>,
}

impl ValueTable {
    fn from_q(model: &BefModel, q: Vec<DMatrix<f64>>, lookup: Lookup) -> ValueTable {
        let n = model.grid().len();
        let mut v = Vec::with_capacity(q.len() + 1);
        let mut greedy = Vec::with_capacity(q.len());
        for qh in &q {
            let rows: Vec<usize> = (0..n)
                .map(|i| argmax(qh.row(i).transpose().as_slice()))
                .collect();
            v.push(DVector::from_fn(n, |i, _| qh[(i, rows[i])]));
            greedy.push(rows);
        }
        v.push(DVector::zeros(n));
        ValueTable {
            grid: model.grid().clone(),
            finite: model.state_space().is_finite(),
            lookup,
            q,
            v,
            greedy,
        }
    }

    pub fn horizon(&self) -> usize {
        self.q.len()
    }

    pub fn grid(&self) -> &StateGrid {
        &self.grid
    }

    pub fn with_lookup(mut self, lookup: Lookup) -> ValueTable {
        self.lookup = lookup;
        self
    }

    /// `Q_h` as a `grid × actions` matrix, `h` in `1..=H`.
    pub fn q(&self, h: usize) -> &DMatrix<f64> {
        &self.q[h - 1]
    }

    /// `V_h` on the grid, `h` in `1..=H+1`.
    pub fn v(&self, h: usize) -> &DVector<f64> {
        &self.v[h - 1]
    }

    /// `Q_h(s, ·)` at an arbitrary state.
    pub fn q_row(&self, h: usize, s: f64) -> Vec<f64> {
        let q = self.q(h);
        match self.bracket(s) {
            (i, _, None) => q.row(i).iter().copied().collect(),
            (i, j, Some(t)) => q
                .row(i)
                .iter()
                .zip(q.row(j).iter())
                .map(|(a, b)| (1.0 - t) * a + t * b)
                .collect(),
        }
    }

    /// `V_h(s)` at an arbitrary state.
    pub fn value(&self, h: usize, s: f64) -> f64 {
        if h > self.horizon() {
            return 0.0;
        }
        self.q_row(h, s)
            .into_iter()
            .fold(f64::NEG_INFINITY, f64::max)
    }

    /// Greedy action at step `h`; ties go to the lowest index.
    pub fn greedy_action(&self, h: usize, s: f64) -> usize {
        match self.bracket(s) {
            (i, _, None) => self.greedy[h - 1][i],
            _ => argmax(&self.q_row(h, s)),
        }
    }

    /// Node index, neighbour and interpolation weight (`None` for a pure node lookup).
    fn bracket(&self, s: f64) -> (usize, usize, Option<f64>) {
        if self.finite {
            return (s as usize, s as usize, None);
        }
        let pts = &self.grid.points;
        match self.lookup {
            Lookup::Nearest => {
                let i = self.grid.nearest(s);
                (i, i, None)
            }
            Lookup::Linear => {
                let j = pts.partition_point(|&x| x < s);
                if j == 0 || j == pts.len() {
                    let i = self.grid.nearest(s);
                    (i, i, None)
                } else {
                    let t = (s - pts[j - 1]) / (pts[j] - pts[j - 1]);
                    (j - 1, j, Some(t))
                }
            }
        }
    }

    /// CSV rows `h,state_index,action_index,q`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["h", "state_index", "action_index", "q"])?;
        for (h, qh) in self.q.iter().enumerate() {
            for i in 0..qh.nrows() {
                for a in 0..qh.ncols() {
                    w.write_record(&[
                        (h + 1).to_string(),
                        i.to_string(),
                        a.to_string(),
                        format!("{:.17e}", qh[(i, a)]),
                    ])?;
                }
            }
        }
        w.flush().map_err(|e| Error::io("<csv>", e))?;
        Ok(())
    }
}

/// `∫ P_θ(s'|s,a) V(s') ds'` by direct sum or quadrature.
pub fn next_state_expectation_exact(
    model: &BefModel,
    theta_p: &DVector<f64>,
    v_next: &[f64],
    s: f64,
    a: usize,
) -> Result<f64> {
    Ok(model.next_state_dist(theta_p, s, a)?.expectation(v_next))
}

/// Per-call precomputation: every `(s, a)` row of the one-step operator.
enum Operator {
    /// `P[(s, a), s']` masses.
    Exact(DMatrix<f64>),
    /// `Q = v̄ + pref ⊙ (Zy · g_h)` with `g_h = Zxᵀ(ω ⊙ (V − v̄))`.
    Rff {
        pref: DVector<f64>,
        zy: DMatrix<f64>,
        zx_weighted: DMatrix<f64>,
    },
    /// `Q = v̄ + pref ⊙ (K · (V − v̄))` with `K[i, j] = ω_j k(x_j, y_i)`.
    Kernel { pref: DVector<f64>, k: DMatrix<f64> },
}

impl Operator {
    fn build(model: &BefModel, theta_p: &DVector<f64>, backend: Backend<'_>) -> Result<Operator> {
        let n = model.grid().len();
        let n_a = model.n_actions();
        let mut laws = Vec::with_capacity(n * n_a);
        for &s in &model.grid().points {
            for a in 0..n_a {
                let natural = model.natural_param(theta_p, s, a);
                let dist = model.dist_from_natural(&natural)?;
                laws.push((natural, dist));
            }
        }
        if let Backend::Exact = backend {
            let mut p = DMatrix::zeros(laws.len(), n);
            for (i, (_, dist)) in laws.iter().enumerate() {
                p.row_mut(i).copy_from_slice(&dist.mass);
            }
            return Ok(Operator::Exact(p));
        }

        let cond = Conditioning::optimize(model, &laws);
        let side = GridSide::new(model, &cond);
        let mut pref = DVector::zeros(laws.len());
        let mut ys = Vec::with_capacity(laws.len());
        for (i, (natural, dist)) in laws.iter().enumerate() {
            let (y, log_pref) = rff::state_action_side(&cond, &side, natural, dist.log_partition);
            pref[i] = log_pref.exp();
            ys.push(y);
        }
        match backend {
            Backend::Rff(basis) => {
                if basis.dim() != model.p() {
                    return Err(Error::InvalidConfig(format!(
                        "RFF basis has dimension {}, model has p = {}",
                        basis.dim(),
                        model.p()
                    )));
                }
                let mut zx_weighted = basis.feature_rows(&side.x);
                for (j, lw) in side.log_weight.iter().enumerate() {
                    zx_weighted.row_mut(j).scale_mut(lw.exp());
                }
                Ok(Operator::Rff {
                    pref,
                    zy: basis.feature_rows(&ys),
                    zx_weighted,
                })
            }
            Backend::Kernel => {
                let k = DMatrix::from_fn(laws.len(), n, |i, j| {
                    (side.log_weight[j] - 0.5 * (&side.x[j] - &ys[i]).norm_squared()).exp()
                });
                Ok(Operator::Kernel { pref, k })
            }
            Backend::Exact => unreachable!("handled above"),
        }
    }

    fn apply(&self, v: &DVector<f64>) -> DVector<f64> {
        let offset = rff::value_offset(v.as_slice());
        let centered = v.add_scalar(-offset);
        match self {
            Operator::Exact(p) => p * v,
            Operator::Rff {
                pref,
                zy,
                zx_weighted,
            } => {
                let g = zx_weighted.tr_mul(&centered);
                (zy * g).component_mul(pref).add_scalar(offset)
            }
            Operator::Kernel { pref, k } => (k * centered).component_mul(pref).add_scalar(offset),
        }
    }
}

fn expected_rewards(model: &BefModel, theta_r: &DVector<f64>) -> DVector<f64> {
    let n_a = model.n_actions();
    let pts = &model.grid().points;
    DVector::from_fn(pts.len() * n_a, |i, _| {
        model.expected_reward(theta_r, pts[i / n_a], i % n_a)
    })
}

fn check_params(model: &BefModel, theta_p: &DVector<f64>, theta_r: &DVector<f64>) -> Result<()> {
    if theta_p.len() != model.d() || theta_r.len() != model.d() {
        return Err(Error::InvalidModel(
            "parameter length does not match d".into(),
        ));
    }
    if theta_p.iter().chain(theta_r.iter()).any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("planner parameters"));
    }
    Ok(())
}

/// `Q_h(s,a) = E^{θ_r}[r] + ∫ P_{θ_p}(s'|s,a) V_{h+1}(s') ds'`, `V_h = max_a Q_h`.
pub fn backward_induction(
    model: &BefModel,
    theta_p: &DVector<f64>,
    theta_r: &DVector<f64>,
    horizon: usize,
    backend: Backend<'_>,
) -> Result<ValueTable> {
    check_params(model, theta_p, theta_r)?;
    let op = Operator::build(model, theta_p, backend)?;
    let rewards = expected_rewards(model, theta_r);
    let (n, n_a) = (model.grid().len(), model.n_actions());
    let mut q = vec![DMatrix::zeros(n, n_a); horizon];
    let mut v_next = DVector::zeros(n);
    for h in (0..horizon).rev() {
        let qh = &rewards + op.apply(&v_next);
        // rows of the operator are ordered (s, a) with a fastest, i.e. row-major
        q[h] = DMatrix::from_row_slice(n, n_a, qh.as_slice());
        v_next = DVector::from_fn(n, |i, _| {
            q[h].row(i)
                .iter()
                .copied()
                .fold(f64::NEG_INFINITY, f64::max)
        });
    }
    Ok(ValueTable::from_q(model, q, Lookup::Nearest))
}

/// Exact value of a (possibly nonstationary) policy, evaluated on the model grid.
/// `policy(h, s)` is queried at grid nodes only.
pub fn evaluate_policy(
    model: &BefModel,
    theta_p: &DVector<f64>,
    theta_r: &DVector<f64>,
    horizon: usize,
    policy: &dyn Fn(usize, f64) -> usize,
) -> Result<ValueTable> {
    Ok(PolicyEvaluator::new(model, theta_p, theta_r)?.evaluate(horizon, policy))
}

/// Exact dynamic programming under fixed parameters, with the transition
/// operator built once and reused across calls.
#[derive(Clone, Debug)]
pub struct PolicyEvaluator {
    model: BefModel,
    theta_p: DVector<f64>,
    theta_r: DVector<f64>,
    p: DMatrix<f64>,
    rewards: DVector<f64>,
}

impl PolicyEvaluator {
    pub fn new(
        model: &BefModel,
        theta_p: &DVector<f64>,
        theta_r: &DVector<f64>,
    ) -> Result<PolicyEvaluator> {
        check_params(model, theta_p, theta_r)?;
        let Operator::Exact(p) = Operator::build(model, theta_p, Backend::Exact)? else {
            unreachable!("exact backend builds an exact operator")
        };
        Ok(PolicyEvaluator {
            model: model.clone(),
            theta_p: theta_p.clone(),
            theta_r: theta_r.clone(),
            p,
            rewards: expected_rewards(model, theta_r),
        })
    }

    pub fn model(&self) -> &BefModel {
        &self.model
    }

    fn backward(
        &self,
        horizon: usize,
        select: &dyn Fn(usize, f64, &[f64]) -> f64,
    ) -> Vec<DMatrix<f64>> {
        let (n, n_a) = (self.model.grid().len(), self.model.n_actions());
        let pts = &self.model.grid().points;
        let mut q = vec![DMatrix::zeros(n, n_a); horizon];
        let mut v_next = DVector::zeros(n);
        for h in (0..horizon).rev() {
            let qh = &self.rewards + &self.p * &v_next;
            q[h] = DMatrix::from_row_slice(n, n_a, qh.as_slice());
            v_next = DVector::from_fn(n, |i, _| {
                let row: Vec<f64> = q[h].row(i).iter().copied().collect();
                select(h + 1, pts[i], &row)
            });
        }
        q
    }

    pub fn optimal(&self, horizon: usize) -> ValueTable {
        let q = self.backward(horizon, &|_, _, row| {
            row.iter().copied().fold(f64::NEG_INFINITY, f64::max)
        });
        ValueTable::from_q(&self.model, q, Lookup::Nearest)
    }

    /// Value of a deterministic policy; `V` and the greedy column follow it.
    pub fn evaluate(&self, horizon: usize, policy: &dyn Fn(usize, f64) -> usize) -> ValueTable {
        let q = self.backward(horizon, &|h, s, row| row[policy(h, s)]);
        let mut table = ValueTable::from_q(&self.model, q, Lookup::Nearest);
        for h in 0..horizon {
            for (i, &s) in self.model.grid().points.iter().enumerate() {
                let a = policy(h + 1, s);
                table.greedy[h][i] = a;
                table.v[h][i] = table.q[h][(i, a)];
            }
        }
        table
    }

    /// Value of the policy drawing actions uniformly at random.
    pub fn evaluate_uniform(&self, horizon: usize) -> ValueTable {
        let q = self.backward(horizon, &|_, _, row| {
            row.iter().sum::<f64>() / row.len() as f64
        });
        let mut table = ValueTable::from_q(&self.model, q, Lookup::Nearest);
        for h in 0..horizon {
            for i in 0..self.model.grid().len() {
                let row = table.q[h].row(i);
                table.v[h][i] = row.sum() / row.len() as f64;
            }
        }
        table
    }

    /// One exact backup at an arbitrary state, using `V_{h+1}` from `table`.
    pub fn backup(&self, table: &ValueTable, h: usize, s: f64, a: usize) -> Result<f64> {
        one_step_backup(&self.model, &self.theta_p, &self.theta_r, table, h, s, a)
    }
}

/// `E^{θ_r}[r(s, a)] + ∫ P_{θ_p}(s'|s,a) V_{h+1}(s') ds'` evaluated exactly at `s`,
/// which need not be a grid node.
pub fn one_step_backup(
    model: &BefModel,
    theta_p: &DVector<f64>,
    theta_r: &DVector<f64>,
    table: &ValueTable,
    h: usize,
    s: f64,
    a: usize,
) -> Result<f64> {
    let v_next = table.v(h + 1);
    let future = next_state_expectation_exact(model, theta_p, v_next.as_slice(), s, a)?;
    Ok(model.expected_reward(theta_r, s, a) + future)
}
