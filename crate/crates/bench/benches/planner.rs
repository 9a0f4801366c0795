use bef_rlsvi::planner::{backward_induction, Backend};
use bef_rlsvi::{Environment, RffBasis};
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

fn exact(c: &mut Criterion) {
    let mut group = c.benchmark_group("backward_induction/exact");
    for name in ["tabular-2", "tabular-3", "gauss-1d"] {
        let env = Environment::builtin(name).unwrap();
        group.bench_function(name, |b| {
            b.iter(|| {
                backward_induction(
                    &env.model,
                    &env.theta_p.theta,
                    &env.theta_r.theta,
                    env.horizon,
                    Backend::Exact,
                )
                .unwrap()
            })
        });
    }
    group.finish();
}

fn rff(c: &mut Criterion) {
    let env = Environment::builtin("gauss-1d").unwrap();
    let mut group = c.benchmark_group("backward_induction/rff");
    for n in [256, 1024, 4096] {
        let basis = RffBasis::from_seed(env.model.p(), n, 0);
        group.bench_with_input(BenchmarkId::from_parameter(n), &basis, |b, basis| {
            b.iter(|| {
                backward_induction(
                    &env.model,
                    &env.theta_p.theta,
                    &env.theta_r.theta,
                    env.horizon,
                    Backend::Rff(basis),
                )
                .unwrap()
            })
        });
    }
    group.finish();
}

criterion_group!(benches, exact, rff);
criterion_main!(benches);
