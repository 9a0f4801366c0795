//! Feature-map selectors and the JSON form of a model.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::{BefModel, StateSpace};
use crate::error::{Error, Result};

/// Next-state features ψ.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum PsiMap {
    /// Indicator of the next state (finite spaces only).
    OneHot,
    /// `(u, u², …, u^degree)` with `u` the position rescaled to `[0, 1]`.
    Polynomial { degree: usize },
    /// `(s − lo, s²)` on an interval. The shift keeps entries nonnegative and
    /// only changes the log-partition.
    Gaussian,
}

/// State-action features φ.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum PhiMap {
    /// Indicator of the pair `(s, a)` at index `s·A + a` (finite spaces only).
    OneHot,
    /// `e_a ⊗ (1, u, …, u^degree)`.
    Polynomial { degree: usize },
    /// `(e_a ⊗ (1, u), 1)`: a per-action affine mean plus a constant slot for
    /// the quadratic coordinate.
    Gaussian,
}

fn finite_count(space: &StateSpace, what: &str) -> Result<usize> {
    match *space {
        StateSpace::Finite { count } => Ok(count),
        StateSpace::Interval { .. } => Err(Error::InvalidModel(format!(
            "{what} one-hot features need a finite state space"
        ))),
    }
}

fn powers(u: f64, from: i32, to: i32) -> impl Iterator<Item = f64> {
    (from..=to).map(move |k| u.powi(k))
}

impl PsiMap {
    pub fn dim(&self, space: &StateSpace) -> Result<usize> {
        match *self {
            PsiMap::OneHot => finite_count(space, "psi"),
            PsiMap::Polynomial { degree: 0 } => Err(Error::InvalidModel(
                "polynomial psi needs degree >= 1".into(),
            )),
            PsiMap::Polynomial { degree } => Ok(degree),
            PsiMap::Gaussian => match space {
                StateSpace::Interval { .. } => Ok(2),
                StateSpace::Finite { .. } => Err(Error::InvalidModel(
                    "gaussian psi needs an interval state space".into(),
                )),
            },
        }
    }

    pub fn eval(&self, space: &StateSpace, s: f64) -> DVector<f64> {
        match *self {
            PsiMap::OneHot => {
                let count = finite_count(space, "psi").expect("validated");
                let mut v = DVector::zeros(count);
                v[s as usize] = 1.0;
                v
            }
            PsiMap::Polynomial { degree } => {
                DVector::from_iterator(degree, powers(space.unit_position(s), 1, degree as i32))
            }
            PsiMap::Gaussian => {
                let lo = match *space {
                    StateSpace::Interval { lo, .. } => lo,
                    StateSpace::Finite { .. } => 0.0,
                };
                DVector::from_vec(vec![s - lo, s * s])
            }
        }
    }
}

impl PhiMap {
    pub fn dim(&self, space: &StateSpace, n_actions: usize) -> Result<usize> {
        match *self {
            PhiMap::OneHot => Ok(finite_count(space, "phi")? * n_actions),
            PhiMap::Polynomial { degree } => Ok((degree + 1) * n_actions),
            PhiMap::Gaussian => Ok(2 * n_actions + 1),
        }
    }

    pub fn eval(&self, space: &StateSpace, n_actions: usize, s: f64, a: usize) -> DVector<f64> {
        match *self {
            PhiMap::OneHot => {
                let count = finite_count(space, "phi").expect("validated");
                let mut v = DVector::zeros(count * n_actions);
                v[s as usize * n_actions + a] = 1.0;
                v
            }
            PhiMap::Polynomial { degree } => {
                let block = degree + 1;
                let mut v = DVector::zeros(block * n_actions);
                for (k, x) in powers(space.unit_position(s), 0, degree as i32).enumerate() {
                    v[a * block + k] = x;
                }
                v
            }
            PhiMap::Gaussian => {
                let mut v = DVector::zeros(2 * n_actions + 1);
                v[2 * a] = 1.0;
                v[2 * a + 1] = space.unit_position(s);
                v[2 * n_actions] = 1.0;
                v
            }
        }
    }
}

/// Serializable description of a [`BefModel`]; matrices are lists of rows.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelDef {
    pub state_space: StateSpace,
    pub actions: Vec<String>,
    pub psi: PsiMap,
    pub phi: PhiMap,
    pub a: Vec<Vec<Vec<f64>>>,
    pub b: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub psi_max: Option<f64>,
}

impl ModelDef {
    pub fn build(&self) -> Result<BefModel> {
        let mut mats = Vec::with_capacity(self.a.len());
        for (i, rows) in self.a.iter().enumerate() {
            let ncols = rows.first().map_or(0, Vec::len);
            if rows.iter().any(|r| r.len() != ncols) {
                return Err(Error::InvalidModel(format!("A_{i} has ragged rows")));
            }
            let flat: Vec<f64> = rows.iter().flatten().copied().collect();
            mats.push(DMatrix::from_row_slice(rows.len(), ncols, &flat));
        }
        BefModel::with_psi_bound(
            self.state_space.clone(),
            self.actions.clone(),
            self.psi.clone(),
            self.phi.clone(),
            mats,
            DVector::from_column_slice(&self.b),
            self.psi_max,
        )
    }

    pub fn from_model(model: &BefModel) -> ModelDef {
        let rows = |m: &DMatrix<f64>| -> Vec<Vec<f64>> {
            m.row_iter().map(|r| r.iter().copied().collect()).collect()
        };
        ModelDef {
            state_space: model.state_space().clone(),
            actions: model.actions().to_vec(),
            psi: model.psi_map().clone(),
            phi: model.phi_map().clone(),
            a: model.a_matrices().iter().map(rows).collect(),
            b: model.b().iter().copied().collect(),
            psi_max: model.psi_max,
        }
    }
}
