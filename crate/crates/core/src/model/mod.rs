//! The bilinear exponential family: feature maps, parameter matrices and the
//! transition/reward densities they induce.
//!
//! A model maps a parameter `θ ∈ ℝ^d` to the matrix `M_θ = Σ θ_i A_i` and
//! defines
//!
//! ```text
//! P(s' | s, a) ∝ exp(ψ(s')ᵀ M_θ φ(s, a))
//! P(r  | s, a) ∝ exp(r · Bᵀ M_θ φ(s, a)),   r ∈ [0, 1]
//! ```
//!
//! Interval state spaces are integrated with a fixed Gauss–Legendre grid, so
//! every "integral" below is a weighted sum over that grid.

mod def;
mod family;
pub mod reward;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

pub use def::{ModelDef, PhiMap, PsiMap};
pub use family::NextStateDist;

use crate::error::{Error, Result};
use crate::numerics::gauss_legendre;

pub const DEFAULT_QUAD_NODES: usize = 64;
const MIN_QUAD_NODES: usize = 8;

fn default_quad_nodes() -> usize {
    DEFAULT_QUAD_NODES
}

/// Finite states are encoded by their index (`0.0, 1.0, …`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum StateSpace {
    Finite {
        count: usize,
    },
    Interval {
        lo: f64,
        hi: f64,
        #[serde(default = "default_quad_nodes")]
        quad_nodes: usize,
    },
}

impl StateSpace {
    pub fn validate(&self) -> Result<()> {
        match *self {
            StateSpace::Finite { count: 0 } => Err(Error::InvalidModel(
                "finite state space needs at least one state".into(),
            )),
            StateSpace::Interval { lo, hi, quad_nodes } => {
                if !(lo.is_finite() && hi.is_finite() && lo < hi) {
                    return Err(Error::InvalidModel(format!(
                        "interval [{lo}, {hi}] must satisfy lo < hi"
                    )));
                }
                if quad_nodes < MIN_QUAD_NODES {
                    return Err(Error::InvalidModel(format!(
                        "interval state space needs at least {MIN_QUAD_NODES} quadrature nodes, got {quad_nodes}"
                    )));
                }
                Ok(())
            }
            StateSpace::Finite { .. } => Ok(()),
        }
    }

    pub fn is_finite(&self) -> bool {
        matches!(self, StateSpace::Finite { .. })
    }

    pub fn contains(&self, s: f64) -> bool {
        match *self {
            StateSpace::Finite { count } => s >= 0.0 && s.fract() == 0.0 && (s as usize) < count,
            StateSpace::Interval { lo, hi, .. } => (lo..=hi).contains(&s),
        }
    }

    /// Same space with `factor` times as many quadrature nodes (identity for finite spaces).
    pub fn refined(&self, factor: usize) -> StateSpace {
        match *self {
            StateSpace::Interval { lo, hi, quad_nodes } => StateSpace::Interval {
                lo,
                hi,
                quad_nodes: quad_nodes * factor,
            },
            ref finite => finite.clone(),
        }
    }

    /// Position rescaled to `[0, 1]`.
    pub(crate) fn unit_position(&self, s: f64) -> f64 {
        match *self {
            StateSpace::Finite { count } if count > 1 => s / (count - 1) as f64,
            StateSpace::Finite { .. } => 0.0,
            StateSpace::Interval { lo, hi, .. } => (s - lo) / (hi - lo),
        }
    }
}

/// Integration grid over the state space. For finite spaces every state is a
/// node with unit weight.
#[derive(Clone, Debug)]
pub struct StateGrid {
    pub points: Vec<f64>,
    pub weights: Vec<f64>,
    /// Cell boundaries around each node (length `points.len() + 1`), used for
    /// piecewise-constant sampling on intervals.
    pub edges: Vec<f64>,
}

impl StateGrid {
    pub fn new(space: &StateSpace) -> StateGrid {
        match *space {
            StateSpace::Finite { count } => StateGrid {
                points: (0..count).map(|i| i as f64).collect(),
                weights: vec![1.0; count],
                edges: Vec::new(),
            },
            StateSpace::Interval { lo, hi, quad_nodes } => {
                let (points, weights) = gauss_legendre(lo, hi, quad_nodes);
                let mut edges = Vec::with_capacity(points.len() + 1);
                edges.push(lo);
                edges.extend(points.windows(2).map(|w| 0.5 * (w[0] + w[1])));
                edges.push(hi);
                StateGrid {
                    points,
                    weights,
                    edges,
                }
            }
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Index of the grid node closest to `s`.
    pub fn nearest(&self, s: f64) -> usize {
        let idx = self.points.partition_point(|&x| x < s);
        if idx == 0 {
            0
        } else if idx == self.points.len() {
            idx - 1
        } else if (self.points[idx] - s).abs() < (s - self.points[idx - 1]).abs() {
            idx
        } else {
            idx - 1
        }
    }
}

/// A parameter vector with an optional mask of coordinates that estimation
/// must leave untouched.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamVector {
    #[serde(with = "crate::serde_util::dvector")]
    pub theta: DVector<f64>,
    #[serde(default)]
    pub frozen: Vec<bool>,
}

impl ParamVector {
    pub fn zeros(d: usize) -> ParamVector {
        ParamVector::new(DVector::zeros(d))
    }

    pub fn new(theta: DVector<f64>) -> ParamVector {
        let frozen = vec![false; theta.len()];
        ParamVector { theta, frozen }
    }

    pub fn from_slice(theta: &[f64]) -> ParamVector {
        ParamVector::new(DVector::from_column_slice(theta))
    }

    pub fn with_frozen(mut self, frozen: Vec<bool>) -> ParamVector {
        self.frozen = frozen;
        self
    }

    pub fn len(&self) -> usize {
        self.theta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.theta.is_empty()
    }

    pub fn is_frozen(&self, i: usize) -> bool {
        self.frozen.get(i).copied().unwrap_or(false)
    }

    /// Indices of coordinates estimation may move.
    pub fn free_indices(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| !self.is_frozen(i)).collect()
    }

    pub fn validate(&self, d: usize) -> Result<()> {
        if self.theta.len() != d {
            return Err(Error::InvalidModel(format!(
                "parameter has length {}, model has d = {d}",
                self.theta.len()
            )));
        }
        if !self.frozen.is_empty() && self.frozen.len() != d {
            return Err(Error::InvalidModel(format!(
                "frozen mask has length {}, expected {d}",
                self.frozen.len()
            )));
        }
        if self.theta.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("parameter vector"));
        }
        Ok(())
    }
}

/// Smoothness and norm constants of a model.
///
/// `alpha_*`/`beta_*` sandwich the curvature of the log-partitions, `b_a`
/// bounds `‖θ‖_𝔸` for the true parameters and `b_phi_a` bounds `‖𝔸⁻¹G_{s,a}‖`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConstants {
    pub alpha_p: f64,
    pub beta_p: f64,
    pub alpha_r: f64,
    pub beta_r: f64,
    pub eta: f64,
    pub b_a: f64,
    pub b_phi_a: f64,
}

impl ModelConstants {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.alpha_p,
            self.beta_p,
            self.alpha_r,
            self.beta_r,
            self.eta,
            self.b_a,
            self.b_phi_a,
        ];
        if all.iter().any(|x| !x.is_finite()) {
            return Err(Error::InvalidModel("model constants must be finite".into()));
        }
        if !(self.alpha_p > 0.0 && self.alpha_p <= self.beta_p) {
            return Err(Error::InvalidModel(format!(
                "need 0 < alpha_p <= beta_p, got {} and {}",
                self.alpha_p, self.beta_p
            )));
        }
        if !(self.alpha_r > 0.0 && self.alpha_r <= self.beta_r) {
            return Err(Error::InvalidModel(format!(
                "need 0 < alpha_r <= beta_r, got {} and {}",
                self.alpha_r, self.beta_r
            )));
        }
        if self.eta <= 0.0 || self.b_a < 0.0 || self.b_phi_a < 0.0 {
            return Err(Error::InvalidModel(
                "eta must be positive and norm bounds nonnegative".into(),
            ));
        }
        Ok(())
    }
}

/// Which of the two families a quantity refers to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    Transition,
    Reward,
}

#[derive(Clone, Debug)]
pub struct BefModel {
    state_space: StateSpace,
    actions: Vec<String>,
    psi_map: PsiMap,
    phi_map: PhiMap,
    a: Vec<DMatrix<f64>>,
    b: DVector<f64>,
    psi_max: Option<f64>,
    p: usize,
    q: usize,
    grid: StateGrid,
    /// ψ evaluated on the grid, one row per node.
    psi_grid: DMatrix<f64>,
    /// 𝔸 = (tr(A_i A_jᵀ))_{ij}
    trace_gram: DMatrix<f64>,
}

impl BefModel {
    pub fn new(
        state_space: StateSpace,
        actions: Vec<String>,
        psi_map: PsiMap,
        phi_map: PhiMap,
        a: Vec<DMatrix<f64>>,
        b: DVector<f64>,
    ) -> Result<BefModel> {
        BefModel::with_psi_bound(state_space, actions, psi_map, phi_map, a, b, None)
    }

    pub fn with_psi_bound(
        state_space: StateSpace,
        actions: Vec<String>,
        psi_map: PsiMap,
        phi_map: PhiMap,
        a: Vec<DMatrix<f64>>,
        b: DVector<f64>,
        psi_max: Option<f64>,
    ) -> Result<BefModel> {
        state_space.validate()?;
        if actions.is_empty() {
            return Err(Error::InvalidModel(
                "at least one action is required".into(),
            ));
        }
        let p = psi_map.dim(&state_space)?;
        let q = phi_map.dim(&state_space, actions.len())?;
        if a.is_empty() {
            return Err(Error::InvalidModel("need at least one A_i matrix".into()));
        }
        for (i, m) in a.iter().enumerate() {
            if m.shape() != (p, q) {
                return Err(Error::InvalidModel(format!(
                    "A_{i} has shape {:?}, expected ({p}, {q})",
                    m.shape()
                )));
            }
            if m.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFinite("A matrix"));
            }
        }
        if b.len() != p {
            return Err(Error::InvalidModel(format!(
                "B has length {}, expected p = {p}",
                b.len()
            )));
        }
        let d = a.len();
        let trace_gram = DMatrix::from_fn(d, d, |i, j| a[i].dot(&a[j]));
        if trace_gram.clone().cholesky().is_none() {
            return Err(Error::InvalidModel(
                "(tr(A_i A_j^T)) is not positive definite; the A_i must be linearly independent"
                    .into(),
            ));
        }

        let grid = StateGrid::new(&state_space);
        let mut psi_grid = DMatrix::zeros(grid.len(), p);
        for (j, &s) in grid.points.iter().enumerate() {
            let v = psi_map.eval(&state_space, s);
            psi_grid.row_mut(j).copy_from(&v.transpose());
        }
        let model = BefModel {
            state_space,
            actions,
            psi_map,
            phi_map,
            a,
            b,
            psi_max,
            p,
            q,
            grid,
            psi_grid,
            trace_gram,
        };
        model.check_features()?;
        Ok(model)
    }

    fn check_features(&self) -> Result<()> {
        if self.psi_grid.iter().any(|&x| x < 0.0) {
            return Err(Error::InvalidModel("psi must be nonnegative".into()));
        }
        if let Some(limit) = self.psi_max {
            let worst = self
                .psi_grid
                .row_iter()
                .map(|r| r.norm())
                .fold(0.0, f64::max);
            if worst > limit {
                return Err(Error::InvalidModel(format!(
                    "max ‖psi(s)‖ = {worst:.3} exceeds psi_max = {limit}"
                )));
            }
        }
        for &s in &self.grid.points {
            for a in 0..self.n_actions() {
                if self.phi(s, a).iter().any(|&x| x < 0.0) {
                    return Err(Error::InvalidModel("phi must be nonnegative".into()));
                }
            }
        }
        Ok(())
    }

    pub fn state_space(&self) -> &StateSpace {
        &self.state_space
    }

    pub fn actions(&self) -> &[String] {
        &self.actions
    }

    pub fn n_actions(&self) -> usize {
        self.actions.len()
    }

    pub fn psi_map(&self) -> &PsiMap {
        &self.psi_map
    }

    pub fn phi_map(&self) -> &PhiMap {
        &self.phi_map
    }

    pub fn a_matrices(&self) -> &[DMatrix<f64>] {
        &self.a
    }

    pub fn b(&self) -> &DVector<f64> {
        &self.b
    }

    pub fn p(&self) -> usize {
        self.p
    }

    pub fn q(&self) -> usize {
        self.q
    }

    pub fn d(&self) -> usize {
        self.a.len()
    }

    pub fn grid(&self) -> &StateGrid {
        &self.grid
    }

    pub fn psi_grid(&self) -> &DMatrix<f64> {
        &self.psi_grid
    }

    /// 𝔸 = (tr(A_i A_jᵀ))_{ij}, the penalty metric.
    pub fn trace_gram(&self) -> &DMatrix<f64> {
        &self.trace_gram
    }

    /// Same model on a grid with `factor` times more quadrature nodes.
    pub fn refined(&self, factor: usize) -> Result<BefModel> {
        BefModel::with_psi_bound(
            self.state_space.refined(factor),
            self.actions.clone(),
            self.psi_map.clone(),
            self.phi_map.clone(),
            self.a.clone(),
            self.b.clone(),
            self.psi_max,
        )
    }

    pub fn psi(&self, s: f64) -> DVector<f64> {
        self.psi_map.eval(&self.state_space, s)
    }

    pub fn phi(&self, s: f64, a: usize) -> DVector<f64> {
        self.phi_map.eval(&self.state_space, self.n_actions(), s, a)
    }

    /// The p×d matrix whose i-th column is `A_i φ(s, a)`.
    pub fn feature_block(&self, s: f64, a: usize) -> DMatrix<f64> {
        let phi = self.phi(s, a);
        let mut block = DMatrix::zeros(self.p, self.d());
        for (i, ai) in self.a.iter().enumerate() {
            block.set_column(i, &(ai * &phi));
        }
        block
    }

    /// `M_θ φ(s, a)`.
    pub fn natural_param(&self, theta: &DVector<f64>, s: f64, a: usize) -> DVector<f64> {
        self.feature_block(s, a) * theta
    }

    /// `G_{s,a} = (φᵀ A_iᵀ A_j φ)_{ij}`.
    pub fn gram_sa(&self, s: f64, a: usize) -> DMatrix<f64> {
        let block = self.feature_block(s, a);
        block.transpose() * block
    }

    pub fn check_state(&self, s: f64) -> Result<()> {
        if self.state_space.contains(s) {
            Ok(())
        } else {
            Err(Error::InvalidModel(format!(
                "state {s} is outside the state space"
            )))
        }
    }

    pub fn check_action(&self, a: usize) -> Result<()> {
        if a < self.n_actions() {
            Ok(())
        } else {
            Err(Error::InvalidModel(format!(
                "action index {a} out of range"
            )))
        }
    }

    pub fn to_def(&self) -> ModelDef {
        ModelDef::from_model(self)
    }

    /// `sup_{s,a} ‖𝔸⁻¹ G_{s,a}‖₂` over the grid.
    pub fn b_phi_a(&self) -> f64 {
        let chol = self
            .trace_gram
            .clone()
            .cholesky()
            .expect("validated at construction");
        let mut worst: f64 = 0.0;
        for &s in &self.grid.points {
            for a in 0..self.n_actions() {
                let m = chol.solve(&self.gram_sa(s, a));
                worst = worst.max(m.singular_values().max());
            }
        }
        worst
    }

    /// `sup_{s,a} tr(G_{s,a})`, the squared Frobenius norm of the feature block.
    pub fn max_feature_frobenius_sq(&self) -> f64 {
        let mut worst: f64 = 0.0;
        for &s in &self.grid.points {
            for a in 0..self.n_actions() {
                worst = worst.max(self.gram_sa(s, a).trace());
            }
        }
        worst
    }

    /// `‖θ‖_𝔸`.
    pub fn a_norm(&self, theta: &DVector<f64>) -> f64 {
        theta.dot(&(&self.trace_gram * theta)).max(0.0).sqrt()
    }
}
