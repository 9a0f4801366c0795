//! Concrete environments with known parameters.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{BefModel, ModelDef, ParamVector, PhiMap, PsiMap, StateSpace};
use crate::planner::{backward_induction, Backend, ValueTable};

pub const ENV_SCHEMA_VERSION: u32 = 1;

/// Interval grids are refined by this factor when computing optimal values.
pub const ORACLE_REFINEMENT: usize = 4;

/// The shipped environments, by name.
pub const BUILTIN_ENVS: [&str; 3] = ["tabular-2", "tabular-3", "gauss-1d"];

fn builtin_source(name: &str) -> Option<&'static str> {
    match name {
        "tabular-2" => Some(include_str!("../../../configs/envs/tabular-2.json")),
        "tabular-3" => Some(include_str!("../../../configs/envs/tabular-3.json")),
        "gauss-1d" => Some(include_str!("../../../configs/envs/gauss-1d.json")),
        _ => None,
    }
}

/// JSON form of an [`Environment`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnvDef {
    pub schema_version: u32,
    pub name: String,
    pub horizon: usize,
    pub initial_state: f64,
    /// Bound on `‖θ‖_𝔸` for both true parameters.
    pub b_a: f64,
    pub model: ModelDef,
    pub theta_p: ParamVector,
    pub theta_r: ParamVector,
}

#[derive(Clone, Debug)]
pub struct Environment {
    pub name: String,
    pub model: BefModel,
    pub theta_p: ParamVector,
    pub theta_r: ParamVector,
    pub horizon: usize,
    pub initial_state: f64,
    pub b_a: f64,
}

impl Environment {
    pub fn new(
        name: impl Into<String>,
        model: BefModel,
        theta_p: ParamVector,
        theta_r: ParamVector,
        horizon: usize,
        initial_state: f64,
        b_a: f64,
    ) -> Result<Environment> {
        let env = Environment {
            name: name.into(),
            model,
            theta_p,
            theta_r,
            horizon,
            initial_state,
            b_a,
        };
        env.validate()?;
        Ok(env)
    }

    fn validate(&self) -> Result<()> {
        let d = self.model.d();
        self.theta_p.validate(d)?;
        self.theta_r.validate(d)?;
        if self.horizon == 0 {
            return Err(Error::InvalidModel("horizon must be at least 1".into()));
        }
        self.model.check_state(self.initial_state)?;
        for (label, theta) in [("theta_p", &self.theta_p), ("theta_r", &self.theta_r)] {
            let norm = self.model.a_norm(&theta.theta);
            if norm > self.b_a * (1.0 + 1e-12) {
                return Err(Error::InvalidModel(format!(
                    "‖{label}‖_A = {norm:.4} exceeds b_a = {}",
                    self.b_a
                )));
            }
        }
        Ok(())
    }

    pub fn from_def(def: &EnvDef) -> Result<Environment> {
        if def.schema_version != ENV_SCHEMA_VERSION {
            return Err(Error::InvalidConfig(format!(
                "unsupported environment schema_version {} (expected {ENV_SCHEMA_VERSION})",
                def.schema_version
            )));
        }
        Environment::new(
            def.name.clone(),
            def.model.build()?,
            def.theta_p.clone(),
            def.theta_r.clone(),
            def.horizon,
            def.initial_state,
            def.b_a,
        )
    }

    pub fn to_def(&self) -> EnvDef {
        EnvDef {
            schema_version: ENV_SCHEMA_VERSION,
            name: self.name.clone(),
            horizon: self.horizon,
            initial_state: self.initial_state,
            b_a: self.b_a,
            model: self.model.to_def(),
            theta_p: self.theta_p.clone(),
            theta_r: self.theta_r.clone(),
        }
    }

    pub fn from_json(text: &str) -> Result<Environment> {
        Environment::from_def(&serde_json::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<Environment> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Environment::from_json(&text)
    }

    pub fn builtin(name: &str) -> Result<Environment> {
        let src = builtin_source(name).ok_or_else(|| {
            Error::InvalidConfig(format!(
                "unknown environment {name:?}; builtins are {BUILTIN_ENVS:?}"
            ))
        })?;
        Environment::from_json(src)
    }

    /// A builtin name or a path to an environment JSON file.
    pub fn resolve(name_or_path: &str) -> Result<Environment> {
        if builtin_source(name_or_path).is_some() {
            Environment::builtin(name_or_path)
        } else {
            Environment::load(Path::new(name_or_path))
        }
    }

    /// One step under the true parameters: reward first, then next state.
    pub fn step<R: Rng + ?Sized>(&self, s: f64, a: usize, rng: &mut R) -> Result<(f64, f64)> {
        let r = self.model.sample_reward(&self.theta_r.theta, s, a, rng);
        let s_next = self
            .model
            .sample_next_state(&self.theta_p.theta, s, a, rng)?;
        Ok((r, s_next))
    }

    /// The model used for oracle computations: the run model on a grid
    /// refined by `factor` (a no-op for finite spaces).
    pub fn oracle_model(&self, factor: usize) -> Result<BefModel> {
        if self.model.state_space().is_finite() || factor <= 1 {
            Ok(self.model.clone())
        } else {
            self.model.refined(factor)
        }
    }
}

/// Backward induction with the true parameters on a grid refined by `factor`.
pub fn optimal_value(env: &Environment, factor: usize) -> Result<ValueTable> {
    let model = env.oracle_model(factor)?;
    backward_induction(
        &model,
        &env.theta_p.theta,
        &env.theta_r.theta,
        env.horizon,
        Backend::Exact,
    )
}

fn elementary(rows: usize, cols: usize, i: usize, j: usize, value: f64) -> DMatrix<f64> {
    let mut m = DMatrix::zeros(rows, cols);
    m[(i, j)] = value;
    m
}

/// Reward features are scaled by this so the reward parameters stay small.
const TABULAR_REWARD_SCALE: f64 = 4.0;

/// One-hot tabular encoding with `d = S²A` elementary matrices `E_{s',(s,a)}`.
///
/// `logits[s][a][s']` are the transition logits and `reward_natural[s][a]` the
/// reward natural parameter `c(s, a)`; the reward parameter spreads `c` evenly
/// over the `S` coordinates of its column.
pub fn make_tabular_bef(
    name: &str,
    n_states: usize,
    n_actions: usize,
    logits: &[Vec<Vec<f64>>],
    reward_natural: &[Vec<f64>],
    horizon: usize,
    b_a: f64,
) -> Result<Environment> {
    if n_states == 0 || n_actions == 0 {
        return Err(Error::InvalidModel("need S, A >= 1".into()));
    }
    let shape_ok = logits.len() == n_states
        && reward_natural.len() == n_states
        && logits
            .iter()
            .all(|row| row.len() == n_actions && row.iter().all(|l| l.len() == n_states))
        && reward_natural.iter().all(|row| row.len() == n_actions);
    if !shape_ok {
        return Err(Error::InvalidModel(format!(
            "logits must be {n_states}×{n_actions}×{n_states} and rewards {n_states}×{n_actions}"
        )));
    }
    let q = n_states * n_actions;
    let index = |s_next: usize, s: usize, a: usize| s_next * q + s * n_actions + a;
    let mut a_mats = Vec::with_capacity(n_states * q);
    for s_next in 0..n_states {
        for col in 0..q {
            a_mats.push(elementary(n_states, q, s_next, col, 1.0));
        }
    }
    let d = a_mats.len();
    let mut theta_p = DVector::zeros(d);
    let mut theta_r = DVector::zeros(d);
    for s in 0..n_states {
        for a in 0..n_actions {
            for s_next in 0..n_states {
                theta_p[index(s_next, s, a)] = logits[s][a][s_next];
                theta_r[index(s_next, s, a)] =
                    reward_natural[s][a] / (TABULAR_REWARD_SCALE * n_states as f64);
            }
        }
    }
    let model = BefModel::new(
        StateSpace::Finite { count: n_states },
        (0..n_actions).map(|a| format!("a{a}")).collect(),
        PsiMap::OneHot,
        PhiMap::OneHot,
        a_mats,
        DVector::from_element(n_states, TABULAR_REWARD_SCALE),
    )?;
    Environment::new(
        name,
        model,
        ParamVector::new(theta_p),
        ParamVector::new(theta_r),
        horizon,
        0.0,
        b_a,
    )
}

/// Gaussian transitions `s' ~ N(f(s, a), σ²)` truncated to `[lo, hi]`.
///
/// `mean_weights[a] = (w0, w1)` gives `f(s, a) = w0 + w1·u` with
/// `u = (s − lo)/(hi − lo)`; `reward_weights[a]` likewise gives the reward
/// natural parameter. The quadratic coordinate is frozen at `−1/(2σ²)`.
#[allow(clippy::too_many_arguments)]
pub fn make_gaussian_env(
    name: &str,
    mean_weights: &[(f64, f64)],
    reward_weights: &[(f64, f64)],
    sigma: f64,
    interval: (f64, f64),
    quad_nodes: usize,
    horizon: usize,
    b_a: f64,
    psi_max: Option<f64>,
) -> Result<Environment> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::InvalidModel(format!(
            "sigma must be positive, got {sigma}"
        )));
    }
    let n_actions = mean_weights.len();
    if n_actions == 0 || reward_weights.len() != n_actions {
        return Err(Error::InvalidModel(
            "need one mean and one reward weight pair per action".into(),
        ));
    }
    let q = 2 * n_actions + 1;
    let var = sigma * sigma;
    let mut a_mats: Vec<DMatrix<f64>> = (0..2 * n_actions)
        .map(|j| elementary(2, q, 0, j, 1.0 / var))
        .collect();
    a_mats.push(elementary(2, q, 1, q - 1, 1.0));
    let d = a_mats.len();

    let flatten = |w: &[(f64, f64)]| {
        let mut theta = DVector::zeros(d);
        for (a, &(w0, w1)) in w.iter().enumerate() {
            theta[2 * a] = w0;
            theta[2 * a + 1] = w1;
        }
        theta
    };
    let mut frozen = vec![false; d];
    frozen[d - 1] = true;
    let mut theta_p = flatten(mean_weights);
    theta_p[d - 1] = -0.5 / var;
    let theta_r = flatten(reward_weights);

    let model = BefModel::with_psi_bound(
        StateSpace::Interval {
            lo: interval.0,
            hi: interval.1,
            quad_nodes,
        },
        (0..n_actions).map(|a| format!("a{a}")).collect(),
        PsiMap::Gaussian,
        PhiMap::Gaussian,
        a_mats,
        DVector::from_vec(vec![var, 0.0]),
        psi_max,
    )?;
    let initial = 0.5 * (interval.0 + interval.1);
    Environment::new(
        name,
        model,
        ParamVector::new(theta_p).with_frozen(frozen.clone()),
        ParamVector::new(theta_r).with_frozen(vec![false; d]),
        horizon,
        initial,
        b_a,
    )
}

/// The canonical desk environments, built from code.
pub fn build_builtin(name: &str) -> Result<Environment> {
    match name {
        "tabular-2" => {
            // P(stay) = 0.8 for action 0; action 1 switches with 0.8 from
            // state 0 and 0.7 from state 1
            let l8 = 0.5 * 4f64.ln();
            let l7 = 0.5 * (7.0f64 / 3.0).ln();
            let logits = vec![
                vec![vec![l8, -l8], vec![-l8, l8]],
                vec![vec![-l8, l8], vec![l7, -l7]],
            ];
            let rewards = vec![vec![0.0, -1.5], vec![2.5, 1.5]];
            make_tabular_bef(name, 2, 2, &logits, &rewards, 5, 2.0)
        }
        "tabular-3" => {
            // a chain: action 0 drifts left, action 1 pushes right; the right
            // end pays well only under action 1
            let centered = |target: usize, strength: f64| -> Vec<f64> {
                (0..3)
                    .map(|s| strength * (if s == target { 2.0 } else { -1.0 }) / 3.0)
                    .collect()
            };
            let logits = (0..3)
                .map(|s: usize| {
                    vec![
                        centered(s.saturating_sub(1), 1.2),
                        centered((s + 1).min(2), 1.0),
                    ]
                })
                .collect::<Vec<_>>();
            let rewards = vec![vec![0.5, -1.0], vec![0.5, -1.0], vec![0.5, 2.5]];
            make_tabular_bef(name, 3, 2, &logits, &rewards, 8, 3.0)
        }
        "gauss-1d" => make_gaussian_env(
            name,
            &[(-2.4, 4.8), (-3.4, 4.8), (-1.4, 4.8)],
            &[(-1.0, 3.0), (-1.2, 3.0), (-1.2, 3.0)],
            1.0,
            (-3.0, 3.0),
            64,
            5,
            10.0,
            Some(12.0),
        ),
        _ => Err(Error::InvalidConfig(format!(
            "no builder for environment {name:?}"
        ))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn tabular_dimension_is_s_squared_a() {
        let env = build_builtin("tabular-2").unwrap();
        assert_eq!(env.model.d(), 8);
        let env3 = build_builtin("tabular-3").unwrap();
        assert_eq!(env3.model.d(), 18);
    }

    #[test]
    fn zero_logits_are_uniform() {
        let logits = vec![vec![vec![0.0; 3]; 2]; 3];
        let env = make_tabular_bef(
            "z",
            3,
            2,
            &logits,
            &[vec![0.0; 2], vec![0.0; 2], vec![0.0; 2]],
            2,
            1.0,
        )
        .unwrap();
        for s in 0..3 {
            for a in 0..2 {
                let dist = env
                    .model
                    .next_state_dist(&env.theta_p.theta, s as f64, a)
                    .unwrap();
                assert!(dist.mass.iter().all(|m| (m - 1.0 / 3.0).abs() < 1e-15));
            }
        }
    }

    #[test]
    fn tabular_matches_softmax() {
        let env = build_builtin("tabular-3").unwrap();
        let logits = |s: usize, a: usize| -> Vec<f64> {
            (0..3)
                .map(|sn| env.theta_p.theta[sn * 6 + s * 2 + a])
                .collect()
        };
        for s in 0..3 {
            for a in 0..2 {
                let l = logits(s, a);
                let norm: f64 = l.iter().map(|x| x.exp()).sum();
                let dist = env
                    .model
                    .next_state_dist(&env.theta_p.theta, s as f64, a)
                    .unwrap();
                for (m, x) in dist.mass.iter().zip(l) {
                    assert!((m - x.exp() / norm).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn tabular_two_dynamics() {
        let env = build_builtin("tabular-2").unwrap();
        let p = |s: f64, a| {
            env.model
                .next_state_dist(&env.theta_p.theta, s, a)
                .unwrap()
                .mass
        };
        assert!((p(0.0, 0)[0] - 0.8).abs() < 1e-12);
        assert!((p(0.0, 1)[1] - 0.8).abs() < 1e-12);
        assert!((p(1.0, 0)[1] - 0.8).abs() < 1e-12);
        assert!((p(1.0, 1)[0] - 0.7).abs() < 1e-12);
        let c = env.model.reward_natural(&env.theta_r.theta, 1.0, 0);
        assert!((c - 2.5).abs() < 1e-12);
    }

    #[test]
    fn builtins_match_shipped_files() {
        for name in BUILTIN_ENVS {
            let shipped: EnvDef = serde_json::from_str(builtin_source(name).unwrap()).unwrap();
            assert_eq!(shipped, build_builtin(name).unwrap().to_def(), "{name}");
        }
    }

    #[test]
    fn env_def_round_trips() {
        let env = build_builtin("gauss-1d").unwrap();
        let json = serde_json::to_string(&env.to_def()).unwrap();
        let back = Environment::from_json(&json).unwrap();
        assert_eq!(back.to_def(), env.to_def());
    }

    #[test]
    fn parameter_norm_is_checked() {
        let logits = vec![vec![vec![5.0, -5.0]]; 2];
        let err = make_tabular_bef("big", 2, 1, &logits, &[vec![0.0], vec![0.0]], 2, 1.0);
        assert!(matches!(err, Err(Error::InvalidModel(_))));
    }

    #[test]
    fn steps_stay_in_space() {
        let env = build_builtin("gauss-1d").unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut s = env.initial_state;
        for _ in 0..2000 {
            let (r, next) = env.step(s, 2, &mut rng).unwrap();
            assert!((0.0..=1.0).contains(&r));
            assert!((-3.0..=3.0).contains(&next));
            s = next;
        }
    }

    #[test]
    fn high_reward_everywhere_gives_value_near_horizon() {
        let logits = vec![vec![vec![0.3, -0.3]]; 2];
        let env =
            make_tabular_bef("hi", 2, 1, &logits, &[vec![400.0], vec![400.0]], 4, 100.0).unwrap();
        let table = optimal_value(&env, 1).unwrap();
        assert!((table.v(1)[0] - 4.0).abs() < 0.02);
    }
}
