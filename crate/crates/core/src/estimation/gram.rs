use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::BefModel;

/// `Ḡ = (η/α)𝔸 + Σ G_{s,a}` with a cached Cholesky factor.
#[derive(Clone, Debug)]
pub struct GramAccumulator {
    regularizer: DMatrix<f64>,
    accumulated: DMatrix<f64>,
    chol: Cholesky<f64, Dyn>,
    log_det: f64,
    updates: usize,
}

#[derive(Serialize, Deserialize)]
struct GramParts {
    #[serde(with = "crate::serde_util::dmatrix")]
    regularizer: DMatrix<f64>,
    #[serde(with = "crate::serde_util::dmatrix")]
    accumulated: DMatrix<f64>,
    updates: usize,
}

impl GramAccumulator {
    pub fn new(model: &BefModel, eta: f64, alpha: f64) -> Result<GramAccumulator> {
        if !(eta > 0.0 && alpha > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "Gram regularizer needs eta > 0 and alpha > 0, got {eta} and {alpha}"
            )));
        }
        let regularizer = model.trace_gram() * (eta / alpha);
        let d = regularizer.nrows();
        GramAccumulator::from_parts(regularizer, DMatrix::zeros(d, d), 0)
    }

    pub fn from_parts(
        regularizer: DMatrix<f64>,
        accumulated: DMatrix<f64>,
        updates: usize,
    ) -> Result<GramAccumulator> {
        if regularizer.shape() != accumulated.shape() || !regularizer.is_square() {
            return Err(Error::InvalidModel(
                "Gram parts have mismatched shapes".into(),
            ));
        }
        let (chol, log_det) = factor(&(&regularizer + &accumulated))?;
        Ok(GramAccumulator {
            regularizer,
            accumulated,
            chol,
            log_det,
            updates,
        })
    }

    /// Adds `G_{s,a}` and refactors.
    pub fn update(&mut self, model: &BefModel, s: f64, a: usize) -> Result<()> {
        self.add(&model.gram_sa(s, a))
    }

    pub fn add(&mut self, g: &DMatrix<f64>) -> Result<()> {
        self.accumulated += g;
        let (chol, log_det) = factor(&self.matrix())?;
        self.chol = chol;
        self.log_det = log_det;
        self.updates += 1;
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.regularizer.nrows()
    }

    pub fn updates(&self) -> usize {
        self.updates
    }

    pub fn regularizer(&self) -> &DMatrix<f64> {
        &self.regularizer
    }

    pub fn accumulated(&self) -> &DMatrix<f64> {
        &self.accumulated
    }

    /// The full matrix `Ḡ`.
    pub fn matrix(&self) -> DMatrix<f64> {
        &self.regularizer + &self.accumulated
    }

    pub fn cholesky(&self) -> &Cholesky<f64, Dyn> {
        &self.chol
    }

    pub fn log_det(&self) -> f64 {
        self.log_det
    }

    /// `‖x‖²_Ḡ`.
    pub fn norm_sq(&self, x: &DVector<f64>) -> f64 {
        let lt_x = self.chol.l().transpose() * x;
        lt_x.norm_squared()
    }

    /// `‖x‖²_{Ḡ⁻¹}`.
    pub fn inv_norm_sq(&self, x: &DVector<f64>) -> f64 {
        let y = self
            .chol
            .l_dirty()
            .solve_lower_triangular(x)
            .expect("Cholesky factor has a positive diagonal");
        y.norm_squared()
    }

    /// `tr(Ḡ⁻¹ G)` for `G = ΦᵀΦ`, i.e. the squared `Ḡ⁻¹`-norm of the feature block `Φ`.
    pub fn potential(&self, block: &DMatrix<f64>) -> f64 {
        let y = self
            .chol
            .l_dirty()
            .solve_lower_triangular(&block.transpose())
            .expect("Cholesky factor has a positive diagonal");
        y.norm_squared()
    }

    /// `log det(I + (α/η) 𝔸⁻¹ ΣG) = log det Ḡ − log det((η/α)𝔸)`.
    pub fn log_det_ratio(&self) -> Result<f64> {
        let (_, base) = factor(&self.regularizer)?;
        Ok(self.log_det - base)
    }
}

fn factor(m: &DMatrix<f64>) -> Result<(Cholesky<f64, Dyn>, f64)> {
    if m.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("Gram matrix"));
    }
    let chol = m
        .clone()
        .cholesky()
        .ok_or(Error::NotPositiveDefinite("Gram matrix"))?;
    let log_det = 2.0
        * chol
            .l_dirty()
            .diagonal()
            .iter()
            .map(|x| x.ln())
            .sum::<f64>();
    Ok((chol, log_det))
}

impl Serialize for GramAccumulator {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        GramParts {
            regularizer: self.regularizer.clone(),
            accumulated: self.accumulated.clone(),
            updates: self.updates,
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for GramAccumulator {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let parts = GramParts::deserialize(d)?;
        GramAccumulator::from_parts(parts.regularizer, parts.accumulated, parts.updates)
            .map_err(serde::de::Error::custom)
    }
}
