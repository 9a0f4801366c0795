use std::io::Write;
use std::path::Path;

use nalgebra::DVector;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::Checkpoint;
use crate::agent::RegretRecord;
use crate::diagnostics::{
    count_bad_rounds, coverage_check, elliptical_sum_check, estimate_constants,
    noise_quantile_ratio, noise_within_bound, optimism_rate, reward_transportation_sweep,
    transportation_sweep, DiagnosticReport,
};
use crate::envs::{EnvDef, Environment};
use crate::error::{Error, Result};
use crate::estimation::GramAccumulator;
use crate::model::{reward, BefModel, ModelDef, ParamVector};

pub fn read_records(path: &Path) -> Result<Vec<RegretRecord>> {
    let mut reader = csv::Reader::from_path(path)?;
    reader
        .deserialize()
        .map(|r| r.map_err(Error::from))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlotRow {
    pub k: usize,
    pub mean_cum_regret: f64,
    pub ci_lo: f64,
    pub ci_hi: f64,
}

/// Mean cumulative regret per episode across seeds with a normal 95% band.
pub fn plot_data(records: &[RegretRecord]) -> Vec<PlotRow> {
    let k_max = records.iter().map(|r| r.k).max().unwrap_or(0);
    let mut by_k: Vec<Vec<f64>> = vec![Vec::new(); k_max];
    for r in records {
        if r.k >= 1 {
            by_k[r.k - 1].push(r.cum_regret);
        }
    }
    by_k.iter()
        .enumerate()
        .filter(|(_, v)| !v.is_empty())
        .map(|(i, v)| {
            let n = v.len() as f64;
            let mean = v.iter().sum::<f64>() / n;
            let half = if v.len() > 1 {
                let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
                1.96 * (var / n).sqrt()
            } else {
                0.0
            };
            PlotRow {
                k: i + 1,
                mean_cum_regret: mean,
                ci_lo: mean - half,
                ci_hi: mean + half,
            }
        })
        .collect()
}

pub fn write_plot_data<W: Write>(rows: &[PlotRow], out: W) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_writer(out);
    w.write_record(["k", "mean_cum_regret", "ci_lo", "ci_hi"])?;
    for row in rows {
        w.serialize(row)?;
    }
    w.flush().map_err(|e| Error::io("<csv>", e))?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiagnoseOptions {
    pub deltas: Vec<f64>,
    pub transport_instances: usize,
    pub constant_samples: usize,
    pub seed: u64,
    /// Refit the estimators at every episode to check coverage (slow on long runs).
    pub coverage: bool,
}

impl Default for DiagnoseOptions {
    fn default() -> Self {
        DiagnoseOptions {
            deltas: vec![0.05, 0.2],
            transport_instances: 500,
            constant_samples: 64,
            seed: 0,
            coverage: true,
        }
    }
}

/// The full diagnostic report for one seed's checkpoint and records.
pub fn diagnose(
    checkpoint: &Checkpoint,
    records: &[RegretRecord],
    options: &DiagnoseOptions,
) -> Result<DiagnosticReport> {
    let env = Environment::from_def(&checkpoint.env)?;
    let model = &env.model;
    let history = &checkpoint.state.history;
    let c = &checkpoint.confidence.constants;

    let gram = GramAccumulator::new(model, c.eta, c.alpha_p)?;
    let bad_rounds = count_bad_rounds(model, history, gram)?;
    let elliptical_sum = elliptical_sum_check(model, history, c.eta, c.alpha_p)?;
    let coverage = if options.coverage {
        coverage_check(
            model,
            (&env.theta_p, &env.theta_r),
            c,
            checkpoint.confidence.horizon,
            history,
            &checkpoint.config.mle,
            &options.deltas,
        )?
    } else {
        Vec::new()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(options.seed);
    let transportation = transportation_sweep(
        model,
        &env.theta_p,
        c.b_a,
        options.transport_instances,
        &mut rng,
    )?;
    let reward_transportation = reward_transportation_sweep(
        model,
        &env.theta_r,
        c.b_a,
        options.transport_instances,
        &mut rng,
    );
    let constants = estimate_constants(
        model,
        &env.theta_p,
        &env.theta_r,
        c.b_a,
        options.constant_samples,
        &mut rng,
    )?;
    let mine: Vec<RegretRecord> = records
        .iter()
        .filter(|r| r.seed == checkpoint.seed)
        .cloned()
        .collect();
    Ok(DiagnosticReport {
        bad_rounds,
        elliptical_sum,
        coverage,
        transportation,
        reward_transportation,
        optimism_rate: optimism_rate(&mine),
        noise_quantile_ratio: noise_quantile_ratio(
            &mine,
            model.d(),
            checkpoint.confidence.delta,
            0.95,
        ),
        noise_within_bound: noise_within_bound(
            &mine,
            model.d(),
            checkpoint.confidence.delta,
            checkpoint.config.concentration_constant,
        ),
        constants,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelCheckReport {
    pub evaluations: usize,
    pub max_normalization_error: f64,
    pub max_gradient_rel_error: f64,
    pub max_hessian_error: f64,
    pub min_kl: f64,
    pub max_self_kl: f64,
    pub min_reward_mean: f64,
    pub max_reward_mean: f64,
    pub max_reward_gradient_error: f64,
    pub pass: bool,
}

const FD_STEP: f64 = 1e-5;

/// Runs the model-math property suite on an environment or model file.
pub fn check_model(path: &Path, samples: usize, seed: u64) -> Result<ModelCheckReport> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let (model, template) = match serde_json::from_str::<EnvDef>(&text) {
        Ok(def) => {
            let env = Environment::from_def(&def)?;
            (env.model, Some(env.theta_p))
        }
        Err(_) => {
            let model = serde_json::from_str::<ModelDef>(&text)?.build()?;
            (model, None)
        }
    };
    let template = template.unwrap_or_else(|| ParamVector::zeros(model.d()));
    check_model_suite(&model, &template, samples, seed)
}

pub(crate) fn check_model_suite(
    model: &BefModel,
    template: &ParamVector,
    samples: usize,
    seed: u64,
) -> Result<ModelCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 0.5).expect("valid normal");
    let d = model.d();
    let mut draw = || {
        DVector::from_fn(d, |i, _| {
            if template.is_frozen(i) {
                template.theta[i]
            } else {
                normal.sample(&mut rng)
            }
        })
    };
    let thetas: Vec<(DVector<f64>, DVector<f64>)> =
        (0..samples.max(1)).map(|_| (draw(), draw())).collect();
    let grid = &model.grid().points;
    let stride = (grid.len() / 8).max(1);
    let states: Vec<f64> = grid.iter().step_by(stride).copied().collect();

    let mut report = ModelCheckReport {
        evaluations: 0,
        max_normalization_error: 0.0,
        max_gradient_rel_error: 0.0,
        max_hessian_error: 0.0,
        min_kl: f64::INFINITY,
        max_self_kl: 0.0,
        min_reward_mean: f64::INFINITY,
        max_reward_mean: f64::NEG_INFINITY,
        max_reward_gradient_error: 0.0,
        pass: false,
    };
    let free = template.free_indices();
    for (theta, other) in &thetas {
        for &s in &states {
            for a in 0..model.n_actions() {
                report.evaluations += 1;
                let dist = model.next_state_dist(theta, s, a)?;
                let total: f64 = dist.mass.iter().sum();
                report.max_normalization_error =
                    report.max_normalization_error.max((total - 1.0).abs());

                let grad = model.grad_log_partition_p(theta, s, a)?;
                let hess = model.hessian_log_partition_p(theta, s, a)?;
                let scale = grad.amax().max(1.0);
                for &i in &free {
                    let mut up = theta.clone();
                    let mut dn = theta.clone();
                    up[i] += FD_STEP;
                    dn[i] -= FD_STEP;
                    let fd = (model.log_partition_p(&up, s, a)?
                        - model.log_partition_p(&dn, s, a)?)
                        / (2.0 * FD_STEP);
                    report.max_gradient_rel_error = report
                        .max_gradient_rel_error
                        .max((fd - grad[i]).abs() / scale);
                    let fd_col = (model.grad_log_partition_p(&up, s, a)?
                        - model.grad_log_partition_p(&dn, s, a)?)
                        / (2.0 * FD_STEP);
                    let h_scale = hess.amax().max(1.0);
                    for &j in &free {
                        report.max_hessian_error = report
                            .max_hessian_error
                            .max((fd_col[j] - hess[(j, i)]).abs() / h_scale);
                    }

                    let mut rup = theta.clone();
                    let mut rdn = theta.clone();
                    rup[i] += FD_STEP;
                    rdn[i] -= FD_STEP;
                    let fd_r = (model.reward_log_partition(&rup, s, a)
                        - model.reward_log_partition(&rdn, s, a))
                        / (2.0 * FD_STEP);
                    let exact_r =
                        model.expected_reward(theta, s, a) * model.reward_direction(s, a)[i];
                    report.max_reward_gradient_error =
                        report.max_reward_gradient_error.max((fd_r - exact_r).abs());
                }
                report.min_kl = report.min_kl.min(model.kl_p(theta, other, s, a)?);
                report.max_self_kl = report
                    .max_self_kl
                    .max(model.kl_p(theta, theta, s, a)?.abs());
                let m = model.expected_reward(theta, s, a);
                report.min_reward_mean = report.min_reward_mean.min(m);
                report.max_reward_mean = report.max_reward_mean.max(m);
                debug_assert!((reward::mean(model.reward_natural(theta, s, a)) - m).abs() < 1e-15);
            }
        }
    }
    report.pass = report.max_normalization_error <= 1e-10
        && report.max_gradient_rel_error <= 1e-6
        && report.max_hessian_error <= 1e-5
        && report.min_kl >= -1e-12
        && report.max_self_kl <= 1e-12
        && report.min_reward_mean > 0.0
        && report.max_reward_mean < 1.0
        && report.max_reward_gradient_error <= 1e-6;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::{build_builtin, BUILTIN_ENVS};

    #[test]
    fn builtin_models_pass_the_suite() {
        for name in BUILTIN_ENVS {
            let env = build_builtin(name).unwrap();
            let report = check_model_suite(&env.model, &env.theta_p, 2, 1).unwrap();
            assert!(report.pass, "{name}: {report:?}");
        }
    }

    fn record(seed: u64, k: usize, cum: f64) -> RegretRecord {
        RegretRecord {
            seed,
            k,
            v_star: 1.0,
            v_policy: 1.0,
            realized_return: 1.0,
            cum_regret: cum,
            optimism: false,
            bad_round: false,
            x_k: 0.0,
            noise_norm: 0.0,
            mle_iters_p: 0,
            mle_iters_r: 0,
            wall_ms: 0,
        }
    }

    #[test]
    fn plot_rows_average_over_seeds() {
        let records = vec![
            record(0, 1, 1.0),
            record(0, 2, 2.0),
            record(1, 1, 3.0),
            record(1, 2, 4.0),
        ];
        let rows = plot_data(&records);
        assert_eq!(rows.len(), 2);
        assert_eq!(rows[0].mean_cum_regret, 2.0);
        assert_eq!(rows[1].mean_cum_regret, 3.0);
        let half = 1.96 * (2.0f64 / 2.0).sqrt();
        assert!((rows[1].ci_hi - 3.0 - half).abs() < 1e-12);
        let mut out = Vec::new();
        write_plot_data(&rows, &mut out).unwrap();
        assert!(String::from_utf8(out)
            .unwrap()
            .starts_with("k,mean_cum_regret,ci_lo,ci_hi\n1,2"));
    }
}
