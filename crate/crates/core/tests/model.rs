mod common;

use bef_rlsvi::diagnostics::sample_in_ball;
use bef_rlsvi::model::reward;
use bef_rlsvi::Environment;
use nalgebra::{DVector, SymmetricEigen};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn envs() -> Vec<Environment> {
    vec![
        Environment::builtin("tabular-2").unwrap(),
        Environment::builtin("tabular-3").unwrap(),
        Environment::builtin("gauss-1d").unwrap(),
        common::wide_gaussian(),
    ]
}

struct Draw {
    theta1: DVector<f64>,
    theta2: DVector<f64>,
    s: f64,
    a: usize,
    direction: DVector<f64>,
}

fn draw(env: &Environment, seed: u64) -> Draw {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let model = &env.model;
    let theta1 = sample_in_ball(model, &env.theta_p, env.b_a, false, &mut rng);
    let theta2 = sample_in_ball(model, &env.theta_p, env.b_a, false, &mut rng);
    let grid = model.grid();
    let s = grid.points[rng.random_range(0..grid.len())];
    let a = rng.random_range(0..model.n_actions());
    let mut direction = DVector::from_fn(model.d(), |_, _| rng.random::<f64>() - 0.5);
    for i in 0..model.d() {
        if env.theta_p.is_frozen(i) {
            direction[i] = 0.0;
        }
    }
    Draw {
        theta1,
        theta2,
        s,
        a,
        direction,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn next_state_law_is_a_distribution(env_ix in 0usize..4, seed in any::<u64>()) {
        let env = &envs()[env_ix];
        let d = draw(env, seed);
        let dist = env.model.next_state_dist(&d.theta1, d.s, d.a).unwrap();
        prop_assert!(dist.mass.iter().all(|&m| m >= 0.0 && m.is_finite()));
        prop_assert!((dist.mass.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn kl_is_nonnegative_and_vanishes_on_the_diagonal(env_ix in 0usize..4, seed in any::<u64>()) {
        let env = &envs()[env_ix];
        let d = draw(env, seed);
        let m = &env.model;
        prop_assert!(m.kl_p(&d.theta1, &d.theta2, d.s, d.a).unwrap() >= -1e-12);
        prop_assert!(m.kl_p(&d.theta1, &d.theta1, d.s, d.a).unwrap().abs() < 1e-12);
    }

    #[test]
    fn gradient_matches_central_difference(env_ix in 0usize..4, seed in any::<u64>()) {
        let env = &envs()[env_ix];
        let d = draw(env, seed);
        let m = &env.model;
        let h = 1e-5;
        let z = |t: &DVector<f64>| m.log_partition_p(t, d.s, d.a).unwrap();
        let fd = (z(&(&d.theta1 + &d.direction * h)) - z(&(&d.theta1 - &d.direction * h))) / (2.0 * h);
        let analytic = m.grad_log_partition_p(&d.theta1, d.s, d.a).unwrap().dot(&d.direction);
        prop_assert!((fd - analytic).abs() <= 1e-6 * (1.0 + analytic.abs()), "fd {fd} vs {analytic}");
    }

    #[test]
    fn log_partition_is_convex(env_ix in 0usize..4, seed in any::<u64>(), t in 0.0f64..1.0) {
        let env = &envs()[env_ix];
        let d = draw(env, seed);
        let m = &env.model;
        let hess = m.hessian_log_partition_p(&d.theta1, d.s, d.a).unwrap();
        let scale = hess.amax().max(1.0);
        prop_assert!(SymmetricEigen::new(hess).eigenvalues.min() >= -1e-10 * scale);
        let z = |th: &DVector<f64>| m.log_partition_p(th, d.s, d.a).unwrap();
        let mid = &d.theta1 * t + &d.theta2 * (1.0 - t);
        prop_assert!(z(&mid) <= t * z(&d.theta1) + (1.0 - t) * z(&d.theta2) + 1e-9);
    }

    #[test]
    fn kl_has_bregman_form(env_ix in 0usize..4, seed in any::<u64>()) {
        let env = &envs()[env_ix];
        let d = draw(env, seed);
        let m = &env.model;
        let z1 = m.log_partition_p(&d.theta1, d.s, d.a).unwrap();
        let z2 = m.log_partition_p(&d.theta2, d.s, d.a).unwrap();
        let g1 = m.grad_log_partition_p(&d.theta1, d.s, d.a).unwrap();
        let bregman = z2 - z1 - g1.dot(&(&d.theta2 - &d.theta1));
        let kl = m.kl_p(&d.theta1, &d.theta2, d.s, d.a).unwrap();
        prop_assert!((kl - bregman).abs() <= 1e-9 * (1.0 + kl.abs()));
    }

    #[test]
    fn reward_moments_are_in_range(c in -200.0f64..200.0) {
        let mean = reward::mean(c);
        let var = reward::variance(c);
        prop_assert!((0.0..=1.0).contains(&mean));
        prop_assert!(var > 0.0 && var <= 1.0 / 12.0 + 1e-12);
        prop_assert!(var <= mean * (1.0 - mean) + 1e-12);
    }

    #[test]
    fn reward_log_partition_derivative_is_the_mean(c in -50.0f64..50.0) {
        let h = 1e-5;
        let fd = (reward::log_partition(c + h) - reward::log_partition(c - h)) / (2.0 * h);
        prop_assert!((fd - reward::mean(c)).abs() < 1e-7);
        let fd2 = (reward::mean(c + h) - reward::mean(c - h)) / (2.0 * h);
        prop_assert!((fd2 - reward::variance(c)).abs() < 1e-7);
    }
}

#[test]
fn reward_mean_matches_truncated_exponential() {
    for c in [-30.0f64, -2.0, -0.3, 0.05, 0.7, 4.0, 25.0] {
        let expected = 1.0 / (1.0 - (-c).exp()) - 1.0 / c;
        assert!((reward::mean(c) - expected).abs() < 1e-12, "c = {c}");
    }
    assert!((reward::mean(0.0) - 0.5).abs() < 1e-15);
    assert!((reward::variance(0.0) - 1.0 / 12.0).abs() < 1e-15);
}

#[test]
fn gaussian_next_state_has_the_stated_mean() {
    let env = common::wide_gaussian();
    let m = &env.model;
    let weights = [(-3.0, 6.0), (2.0, -4.0)];
    let space = m.state_space();
    let (lo, hi) = match *space {
        bef_rlsvi::StateSpace::Interval { lo, hi, .. } => (lo, hi),
        _ => unreachable!(),
    };
    let psi_grid = m.psi_grid();
    for s in [-3.0, 0.0, 2.5] {
        for (a, (w0, w1)) in weights.iter().enumerate() {
            let u = (s - lo) / (hi - lo);
            let dist = m.next_state_dist(&env.theta_p.theta, s, a).unwrap();
            let mean_psi = dist.mean_psi(psi_grid);
            let mean = mean_psi[0] + lo;
            assert!((mean - (w0 + w1 * u)).abs() < 1e-9, "s {s} a {a}: {mean}");
            let second = mean_psi[1] - mean * mean;
            assert!((second - 1.0).abs() < 1e-8, "variance {second}");
        }
    }
}
