#![allow(dead_code)]

use std::path::PathBuf;

use bef_rlsvi::{Environment, History, RunConfig, Transition};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn configs_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

pub fn shipped_config(name: &str) -> RunConfig {
    RunConfig::load(&configs_dir().join(name)).expect("shipped config loads")
}

/// Episodes under the uniformly random policy.
pub fn random_history(env: &Environment, episodes: usize, seed: u64) -> History {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut history = History::new();
    for episode in 1..=episodes {
        let mut s = env.initial_state;
        for step in 1..=env.horizon {
            let a = rng.random_range(0..env.model.n_actions());
            let (r, s_next) = env.step(s, a, &mut rng).unwrap();
            history.push(Transition {
                episode,
                step,
                s,
                a,
                r,
                s_next,
            });
            s = s_next;
        }
    }
    history
}

/// `n` independent steps from uniformly drawn grid states and actions.
pub fn iid_steps(env: &Environment, n: usize, seed: u64) -> Vec<Transition> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let grid = env.model.grid();
    (0..n)
        .map(|t| {
            let s = grid.points[rng.random_range(0..grid.len())];
            let a = rng.random_range(0..env.model.n_actions());
            let (r, s_next) = env.step(s, a, &mut rng).unwrap();
            Transition {
                episode: t + 1,
                step: 1,
                s,
                a,
                r,
                s_next,
            }
        })
        .collect()
}

/// A Gaussian environment whose interval is wide enough that truncation is
/// invisible at double precision for means in `[-4, 4]`.
pub fn wide_gaussian() -> Environment {
    bef_rlsvi::envs::make_gaussian_env(
        "gauss-wide",
        &[(-3.0, 6.0), (2.0, -4.0)],
        &[(-0.5, 1.0), (0.3, -0.8)],
        1.0,
        (-14.0, 14.0),
        160,
        3,
        20.0,
        None,
    )
    .unwrap()
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}
