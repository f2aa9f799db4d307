//! Stiffness laboratory on the heat equation d_t f = (1/eps) Lap f: explicit
//! score matching (unstable for large alpha = dt/eps), the one-step implicit
//! fixed-point scheme (converges to a wrong optimizer), and the multi-step
//! dynamic JKO step, with Gaussian closed-form oracles that expose the
//! differences. Linear-ansatz variants sit alongside the MLP variants so the
//! wrong-optimizer claim is testable without training noise.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::ensemble::{InitSpec, MixtureComponent, ParticleEnsemble, VelocityLaw};
use crate::error::{Error, Result};
use crate::field::{FieldEval, FieldGradient, VelocityField};
use crate::innertime::{BroydenConfig, DynKind, InnerConfig, SolverKind};
use crate::jko::{loss_and_grad, LossSpec, OptimizerState, TrainingSchedule};

/// Gaussian description of the lab's current state.
#[derive(Debug, Clone)]
pub struct GaussianState {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    /// Stiffness ratio dt / eps.
    pub alpha: f64,
}

/// Training controls for the lab's MLP variants.
#[derive(Debug, Clone)]
pub struct HeatTrainCfg {
    pub schedule: TrainingSchedule,
    pub quadrature: usize,
    /// Outer fixed-point iterations of the ism scheme.
    pub outer_iters: usize,
    /// AdamW refit steps per outer iteration.
    pub inner_iters: usize,
    /// Stop the outer loop once the parameter change drops below this.
    pub outer_tol: f64,
    pub picard_damping: f64,
    pub picard_cap: usize,
    pub picard_tol: f64,
}

impl Default for HeatTrainCfg {
    fn default() -> Self {
        HeatTrainCfg {
            schedule: TrainingSchedule {
                eta_max: 1e-2,
                eta_min: 1e-4,
                t0: 100,
                t_max: 400,
            },
            quadrature: 5,
            outer_iters: 15,
            inner_iters: 60,
            outer_tol: 1e-5,
            picard_damping: 0.5,
            picard_cap: 200,
            picard_tol: 1e-10,
        }
    }
}

/// Centered Gaussian particles with analytic log-densities.
pub fn gaussian_particles(n: usize, d_v: usize, sigma: f64, seed: u64) -> ParticleEnsemble {
    let spec = InitSpec {
        d_v,
        n_particles: n,
        space: None,
        velocity: VelocityLaw::Mixture {
            components: vec![MixtureComponent {
                weight: 1.0,
                mean: vec![0.0; d_v],
                variance: sigma * sigma,
            }],
        },
    };
    crate::ensemble::sample_initial(&spec, seed).expect("valid Gaussian spec")
}

/// Per-axis-averaged sample standard deviation (population normalization).
pub fn sample_std(velocities: &[f64], d_v: usize) -> f64 {
    let n = velocities.len() / d_v;
    let mut mean = vec![0.0; d_v];
    for i in 0..n {
        for a in 0..d_v {
            mean[a] += velocities[i * d_v + a];
        }
    }
    for m in mean.iter_mut() {
        *m /= n as f64;
    }
    let mut var = 0.0;
    for i in 0..n {
        for a in 0..d_v {
            let dv = velocities[i * d_v + a] - mean[a];
            var += dv * dv;
        }
    }
    (var / (n * d_v) as f64).sqrt()
}

// ---------------------------------------------------------------------------
// Closed-form oracles and linear-ansatz roots
// ---------------------------------------------------------------------------

/// Exact post-step standard deviation of the Gaussian JKO step:
/// the positive root of sigma1 (sigma1 - sigma0) = alpha.
pub fn gaussian_jko_std_oracle(sigma0: f64, alpha: f64) -> f64 {
    0.5 * (sigma0 + (sigma0 * sigma0 + 4.0 * alpha).sqrt())
}

/// Linear-ansatz JKO slope: the root of lambda (lambda - 1) = alpha / sigma0^2.
pub fn jko_linear_slope(alpha: f64, sigma0: f64) -> f64 {
    gaussian_jko_std_oracle(sigma0, alpha) / sigma0
}

/// Linear-ansatz slope of the one-step implicit scheme: the root of
/// lambda^2 (lambda - 1) = alpha / sigma0^2, solved by Newton to 1e-14.
pub fn ism_linear_slope(alpha: f64, sigma0: f64) -> f64 {
    let beta = alpha / (sigma0 * sigma0);
    // cubic lambda^3 - lambda^2 - beta = 0 has a single root > 1 for beta > 0
    let mut x = (1.0 + beta.cbrt()).max(1.0 + 0.5 * beta);
    for _ in 0..200 {
        let f = x * x * (x - 1.0) - beta;
        let df = 3.0 * x * x - 2.0 * x;
        let dx = f / df;
        x -= dx;
        if dx.abs() < 1e-15 * x.abs() {
            break;
        }
    }
    x
}

/// Analytic variance blow-up factor of the explicit score-matching update at
/// the exact minimizer: post variance (1 + alpha/sigma0^2)^2 sigma0^2 over
/// the exact heat variance sigma0^2 + 2 alpha.
pub fn esm_variance_blowup_factor(sigma0: f64, alpha: f64) -> f64 {
    let s2 = sigma0 * sigma0;
    let post = (1.0 + alpha / s2).powi(2) * s2;
    post / (s2 + 2.0 * alpha)
}

/// Linear-ansatz esm update at the exact minimizer of the explicit loss:
/// v <- v + alpha (v - mean) / sigma^2 with the analytic Gaussian score.
pub fn esm_linear_update(ensemble: &mut ParticleEnsemble, mean: &[f64], variance: f64, alpha: f64) {
    let d = ensemble.d_v;
    for v in ensemble.velocities.chunks_mut(d) {
        for a in 0..d {
            v[a] += alpha * (v[a] - mean[a]) / variance;
        }
    }
}

// ---------------------------------------------------------------------------
// MLP variants
// ---------------------------------------------------------------------------

/// One AdamW minimization of the pointwise loss
/// (1/N) sum_i [ |s(0, v_i)|^2 - 2 alpha div s(0, v_i) ] over fixed points.
fn fit_pointwise_score(
    points: &[f64],
    field: &mut VelocityField,
    alpha: f64,
    iters: usize,
    schedule: &TrainingSchedule,
    opt: &mut OptimizerState,
) -> Result<f64> {
    let d = field.d_v;
    let n = points.len() / d;
    let scale = 1.0 / n as f64;
    let mut last = f64::NAN;
    for it in 0..iters {
        let mut s = vec![0.0; n * d];
        let mut jac = vec![0.0; n * d * d];
        field.eval_jac_batch(0.0, points, &mut s, &mut jac);
        let mut loss = 0.0;
        let mut sbar = vec![0.0; n * d];
        let mut jbar = vec![0.0; n * d * d];
        for i in 0..n {
            let mut div = 0.0;
            for a in 0..d {
                let si = s[i * d + a];
                loss += scale * si * si;
                sbar[i * d + a] = 2.0 * scale * si;
                div += jac[i * d * d + a * d + a];
                jbar[i * d * d + a * d + a] = -2.0 * alpha * scale;
            }
            loss -= 2.0 * alpha * scale * div;
        }
        if !loss.is_finite() {
            return Err(Error::NonFinite("score-matching loss".into()));
        }
        let _ = it;
        let mut grad = FieldGradient::zeros_like(field);
        let mut zbar = vec![0.0; n * d];
        field.vjp_jac_batch(0.0, points, &sbar, &jbar, &mut zbar, &mut grad);
        opt.step(field, &grad, schedule.learning_rate(opt.step_count()));
        last = loss;
    }
    Ok(last)
}

/// Outcome of one lab step.
#[derive(Debug, Clone)]
pub struct HeatStepReport {
    pub post_std: f64,
    pub final_loss: f64,
    /// Per-outer-iteration (field change, transport residual) for ism.
    pub iterations: Vec<(f64, f64)>,
}

/// Explicit score matching: fit s to the current score scale and push
/// particles by one explicit step v <- v + s(v).
pub fn esm_step(
    ensemble: &mut ParticleEnsemble,
    field: &mut VelocityField,
    alpha: f64,
    cfg: &HeatTrainCfg,
) -> Result<HeatStepReport> {
    let mut opt = OptimizerState::new(field);
    let loss = fit_pointwise_score(
        &ensemble.velocities.clone(),
        field,
        alpha,
        cfg.schedule.t_max,
        &cfg.schedule,
        &mut opt,
    )?;
    let d = ensemble.d_v;
    let n = ensemble.len();
    let mut s = vec![0.0; n * d];
    field.eval_batch(0.0, &ensemble.velocities, &mut s);
    for (v, si) in ensemble.velocities.iter_mut().zip(&s) {
        *v += si;
    }
    Ok(HeatStepReport {
        post_std: sample_std(&ensemble.velocities, d),
        final_loss: loss,
        iterations: Vec::new(),
    })
}

/// Damped Picard solve of the implicit transport T(v) = v + s(T(v)) for all
/// particles; errors with the residual when the iteration does not contract.
fn solve_implicit_transport(
    field: &VelocityField,
    v: &[f64],
    cfg: &HeatTrainCfg,
) -> Result<Vec<f64>> {
    let d = field.d_v;
    let n = v.len() / d;
    let mut w = v.to_vec();
    let mut s = vec![0.0; n * d];
    let mut residual = f64::INFINITY;
    for _ in 0..cfg.picard_cap {
        field.eval_batch(0.0, &w, &mut s);
        residual = 0.0;
        for i in 0..n * d {
            let target = v[i] + s[i];
            residual = residual.max((target - w[i]).abs());
            w[i] = (1.0 - cfg.picard_damping) * w[i] + cfg.picard_damping * target;
        }
        if residual <= cfg.picard_tol {
            return Ok(w);
        }
    }
    if residual <= 1e-6 {
        Ok(w)
    } else {
        Err(Error::Convergence {
            residual,
            iters: cfg.picard_cap,
        })
    }
}

/// The fixed-point implementation of implicit score matching: alternate the
/// implicit transport solve with a score refit on the pushed-forward
/// particles. Converges to the one-step implicit optimizer, which deviates
/// from the JKO update in the stiff regime.
pub fn ism_fixed_point_step(
    ensemble: &mut ParticleEnsemble,
    field: &mut VelocityField,
    alpha: f64,
    cfg: &HeatTrainCfg,
) -> Result<HeatStepReport> {
    let d = ensemble.d_v;
    let mut opt = OptimizerState::new(field);
    let mut iterations = Vec::new();
    let mut loss = f64::NAN;
    for _ in 0..cfg.outer_iters {
        let pushed = solve_implicit_transport(field, &ensemble.velocities, cfg)?;
        let before: Vec<f64> = field.params().to_vec();
        loss = fit_pointwise_score(&pushed, field, alpha, cfg.inner_iters, &cfg.schedule, &mut opt)?;
        let change: f64 = field
            .params()
            .iter()
            .zip(&before)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        let mut s = vec![0.0; pushed.len()];
        field.eval_batch(0.0, &pushed, &mut s);
        let mut transport_res = 0.0f64;
        for i in 0..pushed.len() {
            transport_res =
                transport_res.max((ensemble.velocities[i] + s[i] - pushed[i]).abs());
        }
        iterations.push((change, transport_res));
        if change < cfg.outer_tol {
            break;
        }
    }
    let pushed = solve_implicit_transport(field, &ensemble.velocities, cfg)?;
    ensemble.velocities.copy_from_slice(&pushed);
    Ok(HeatStepReport {
        post_std: sample_std(&ensemble.velocities, d),
        final_loss: loss,
        iterations,
    })
}

/// The multi-step dynamic JKO step for the heat equation: minimize the
/// Gauss-Legendre quadrature loss along the RK4-advanced trajectory, then
/// update particles to z(1) and decrement logf by the log-determinant.
pub fn heat_jko_step(
    ensemble: &mut ParticleEnsemble,
    field: &mut VelocityField,
    alpha: f64,
    k_quadrature: usize,
    cfg: &HeatTrainCfg,
) -> Result<HeatStepReport> {
    let d = ensemble.d_v;
    let n = ensemble.len();
    let inner = InnerConfig {
        kind: DynKind::Direct,
        solver: SolverKind::Rk4,
        quadrature: k_quadrature,
        broyden: BroydenConfig::default(),
    };
    // eps |s|^2 - 2 dt div s with eps = 1, dt = alpha, averaged over f^n
    let spec = LossSpec {
        metric_coeff: 1.0 / n as f64,
        ell_coeff: -2.0 * alpha / n as f64,
        terminal: None,
    };
    let mut opt = OptimizerState::new(field);
    let mut loss = f64::NAN;
    for it in 0..cfg.schedule.t_max {
        let (value, _, grad) = loss_and_grad(&ensemble.velocities, field, 1.0, &inner, &spec)?;
        if !value.is_finite() {
            return Err(Error::NonFinite("heat JKO loss".into()));
        }
        opt.step(field, &grad, cfg.schedule.learning_rate(it));
        loss = value;
    }
    let traj = crate::innertime::integrate_trajectory(&ensemble.velocities, field, 1.0, &inner)?;
    ensemble.velocities.copy_from_slice(traj.terminal());
    for (lf, ell) in ensemble.logf.iter_mut().zip(&traj.ell) {
        *lf -= ell;
    }
    Ok(HeatStepReport {
        post_std: sample_std(&ensemble.velocities, d),
        final_loss: loss,
        iterations: Vec::new(),
    })
}

/// Residual norms of the two optimality conditions, evaluated on the
/// transported samples with a Gaussian fit of f^{n+1}:
/// opt_det: T(v) - v + alpha grad log f^{n+1}(T(v)) = 0,
/// opt_tr:  T(v) - v + (alpha/lambda) grad log f^{n+1}(T(v)) = 0 for the
/// linear-map slope lambda (the trace form's first-order structure).
#[derive(Debug, Clone, Copy)]
pub struct OptimalityResiduals {
    pub det: f64,
    pub tr: f64,
}

pub fn optimality_residuals(
    initial: &[f64],
    transported: &[f64],
    d_v: usize,
    alpha: f64,
) -> OptimalityResiduals {
    let n = initial.len() / d_v;
    let mut mean = vec![0.0; d_v];
    for i in 0..n {
        for a in 0..d_v {
            mean[a] += transported[i * d_v + a];
        }
    }
    for m in mean.iter_mut() {
        *m /= n as f64;
    }
    let mut var = 0.0;
    for i in 0..n {
        for a in 0..d_v {
            let dv = transported[i * d_v + a] - mean[a];
            var += dv * dv;
        }
    }
    var /= (n * d_v) as f64;
    let std_in = sample_std(initial, d_v);
    let lambda = var.sqrt() / std_in;
    let mut det = 0.0;
    let mut tr = 0.0;
    for i in 0..n {
        let mut rdet = 0.0;
        let mut rtr = 0.0;
        for a in 0..d_v {
            let w = transported[i * d_v + a];
            let v = initial[i * d_v + a];
            let score = -(w - mean[a]) / var;
            let e_det = w - v + alpha * score;
            let e_tr = w - v + alpha / lambda * score;
            rdet += e_det * e_det;
            rtr += e_tr * e_tr;
        }
        det += rdet.sqrt();
        tr += rtr.sqrt();
    }
    OptimalityResiduals {
        det: det / n as f64,
        tr: tr / n as f64,
    }
}

/// Deterministic lab field initialization.
pub fn lab_field(d_v: usize, seed: u64) -> VelocityField {
    VelocityField::init(d_v, 5, 32, seed).expect("valid lab field shape")
}

/// Fresh RNG stream for lab experiments.
pub fn lab_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn oracle_values() {
        assert_relative_eq!(gaussian_jko_std_oracle(1.0, 0.0), 1.0);
        assert_relative_eq!(
            gaussian_jko_std_oracle(1.0, 1.0),
            (1.0 + 5.0_f64.sqrt()) / 2.0,
            epsilon = 1e-14
        );
        assert_relative_eq!(
            gaussian_jko_std_oracle(2.0, 2.0),
            1.0 + 3.0_f64.sqrt(),
            epsilon = 1e-14
        );
    }

    #[test]
    fn oracle_monotonicity() {
        let mut prev = 0.0;
        for k in 0..20 {
            let alpha = 0.1 * k as f64;
            let s = gaussian_jko_std_oracle(1.0, alpha);
            assert!(s > prev);
            prev = s;
        }
        let mut prev = 0.0;
        for k in 1..20 {
            let s0 = 0.2 * k as f64;
            let s = gaussian_jko_std_oracle(s0, 1.0);
            assert!(s > prev);
            prev = s;
        }
    }

    #[test]
    fn ism_root_satisfies_cubic() {
        for &(alpha, sigma0) in &[(1.0, 1.0), (0.3, 0.7), (100.0, 1.0), (2.0, 1.5)] {
            let lam = ism_linear_slope(alpha, sigma0);
            let beta = alpha / (sigma0 * sigma0);
            assert!(
                (lam * lam * (lam - 1.0) - beta).abs() < 1e-8,
                "alpha={alpha} sigma0={sigma0}: {lam}"
            );
        }
    }

    #[test]
    fn ism_and_jko_roots_differ_at_alpha_one() {
        let ism = ism_linear_slope(1.0, 1.0);
        let jko = jko_linear_slope(1.0, 1.0);
        assert_relative_eq!(ism, 1.4655712, epsilon = 1e-6);
        assert_relative_eq!(jko, 1.6180339, epsilon = 1e-6);
        let gap = (jko - ism).abs() / jko;
        assert!(gap > 0.09, "gap {gap}");
    }

    #[test]
    fn roots_agree_at_leading_order() {
        // both slopes are 1 + beta + O(beta^2)
        for &beta in &[1e-3, 1e-4, 1e-5] {
            let ism = ism_linear_slope(beta, 1.0);
            let jko = jko_linear_slope(beta, 1.0);
            assert!((ism - jko).abs() <= 3.0 * beta * beta, "beta={beta}");
            assert!((ism - 1.0 - beta).abs() <= 3.0 * beta * beta);
        }
    }

    #[test]
    fn esm_blowup_factor() {
        assert_relative_eq!(esm_variance_blowup_factor(1.0, 2.0), 9.0 / 5.0, epsilon = 1e-14);
        // identity as alpha -> 0
        assert_relative_eq!(esm_variance_blowup_factor(1.0, 0.0), 1.0);
    }

    #[test]
    fn esm_linear_update_matches_variance_algebra() {
        let mut e = gaussian_particles(20000, 1, 1.0, 5);
        let pre_var = sample_std(&e.velocities, 1).powi(2);
        let alpha = 2.0;
        esm_linear_update(&mut e, &[0.0], 1.0, alpha);
        let post_var = sample_std(&e.velocities, 1).powi(2);
        // the linear map scales every deviation by exactly (1 + alpha)
        // around the analytic mean 0; sample-mean effects are O(1/N)
        let predicted = (1.0 + alpha).powi(2) * pre_var;
        assert_relative_eq!(post_var, predicted, max_relative = 2e-3);
        // instability exhibit: > 50% variance error vs the exact heat value
        let exact = pre_var + 2.0 * alpha;
        assert!(post_var / exact > 1.5);
    }

    #[test]
    fn optimality_residuals_discriminate_linear_maps() {
        let e = gaussian_particles(20000, 1, 1.0, 6);
        let alpha = 1.0;
        let lam_jko = jko_linear_slope(alpha, 1.0);
        let lam_ism = ism_linear_slope(alpha, 1.0);
        let jko_map: Vec<f64> = e.velocities.iter().map(|v| lam_jko * v).collect();
        let ism_map: Vec<f64> = e.velocities.iter().map(|v| lam_ism * v).collect();
        let r_jko = optimality_residuals(&e.velocities, &jko_map, 1, alpha);
        let r_ism = optimality_residuals(&e.velocities, &ism_map, 1, alpha);
        // the JKO map satisfies opt_det; the ism map satisfies the trace form
        assert!(r_jko.det < 0.02, "JKO det residual {}", r_jko.det);
        assert!(r_ism.det > 3.0 * r_jko.det.max(1e-3), "{:?}", r_ism);
        assert!(r_ism.tr < 0.02, "ism tr residual {}", r_ism.tr);
    }

    #[test]
    fn heat_jko_step_matches_oracle_at_alpha_one() {
        let mut e = gaussian_particles(800, 1, 1.0, 7);
        let mut field = VelocityField::init(1, 4, 16, 2).unwrap();
        let cfg = HeatTrainCfg {
            schedule: TrainingSchedule {
                eta_max: 2e-2,
                eta_min: 1e-4,
                t0: 60,
                t_max: 180,
            },
            ..HeatTrainCfg::default()
        };
        let report = heat_jko_step(&mut e, &mut field, 1.0, 5, &cfg).unwrap();
        let oracle = gaussian_jko_std_oracle(1.0, 1.0);
        let rel = (report.post_std - oracle).abs() / oracle;
        assert!(rel < 0.03, "post std {} vs oracle {oracle}", report.post_std);

        // Gaussianity preservation: the optimal map on Gaussian data is
        // linear, so skewness and excess kurtosis stay in Monte-Carlo bands
        let n = e.len() as f64;
        let mean: f64 = e.velocities.iter().sum::<f64>() / n;
        let m = |p: i32| -> f64 {
            e.velocities.iter().map(|v| (v - mean).powi(p)).sum::<f64>() / n
        };
        let (m2, m3, m4) = (m(2), m(3), m(4));
        let skew = m3 / m2.powf(1.5);
        let exkurt = m4 / (m2 * m2) - 3.0;
        assert!(skew.abs() < 4.0 * (6.0 / n).sqrt(), "skew {skew}");
        assert!(exkurt.abs() < 4.0 * (24.0 / n).sqrt(), "excess kurtosis {exkurt}");
    }

    #[test]
    fn esm_mlp_learns_the_score_for_small_alpha() {
        // enough particles that the empirical divergence term cannot be
        // gamed by spiky fits (the classic score-matching overfit)
        let mut e = gaussian_particles(8000, 1, 1.0, 8);
        let mut field = VelocityField::init(1, 3, 8, 3).unwrap();
        let cfg = HeatTrainCfg {
            schedule: TrainingSchedule {
                eta_max: 1e-2,
                eta_min: 1e-5,
                t0: 400,
                t_max: 400,
            },
            ..HeatTrainCfg::default()
        };
        let alpha = 0.1;
        esm_step(&mut e, &mut field, alpha, &cfg).unwrap();
        // trained field vs the exact minimizer alpha * v / sigma0^2 on a grid
        let mut worst: f64 = 0.0;
        for k in -6..=6 {
            let v = [k as f64 * 0.25];
            let s = crate::field::eval_field(&field, 0.0, &v);
            let target = alpha * v[0];
            if target.abs() > 1e-12 {
                worst = worst.max((s[0] - target).abs() / target.abs().max(0.05));
            }
        }
        assert!(worst < 0.05, "worst relative score error {worst}");
    }
}
