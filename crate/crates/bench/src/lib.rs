//! Fixtures shared by the benchmarks.

use bef_rlsvi::{Environment, History, Transition};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// `episodes` uniformly random episodes on `env`.
pub fn random_history(env: &Environment, episodes: usize, seed: u64) -> History {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut history = History::new();
    for episode in 1..=episodes {
        let mut s = env.initial_state;
        for step in 1..=env.horizon {
            let a = rng.random_range(0..env.model.n_actions());
            let (r, s_next) = env.step(s, a, &mut rng).expect("true parameters are valid");
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
