//! Python bindings for the main solver types and operations.

use std::path::PathBuf;

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use apjko_core::ensemble;
use apjko_core::error::Error;
use apjko_core::field::VelocityField;
use apjko_core::heatlab;
use apjko_core::innertime::{BroydenConfig, SolverKind};
use apjko_core::jko::{self, CollisionConfig, OperatorKind, TrainingSchedule};
use apjko_core::kernels;
use apjko_core::riemann;
use apjko_core::runner;

fn to_py_err(e: Error) -> PyErr {
    match e {
        Error::InvalidSpec(_) | Error::Config { .. } | Error::Domain(_) => {
            PyValueError::new_err(e.to_string())
        }
        other => PyRuntimeError::new_err(other.to_string()),
    }
}

/// A particle ensemble: velocities, per-particle log-densities, uniform weight.
#[pyclass]
#[derive(Clone)]
struct ParticleEnsemble {
    inner: ensemble::ParticleEnsemble,
}

#[pymethods]
impl ParticleEnsemble {
    fn __len__(&self) -> usize {
        self.inner.len()
    }

    #[getter]
    fn weight(&self) -> f64 {
        self.inner.weight
    }

    #[getter]
    fn d_v(&self) -> usize {
        self.inner.d_v
    }

    fn velocities(&self) -> Vec<Vec<f64>> {
        self.inner
            .velocities
            .chunks(self.inner.d_v)
            .map(|c| c.to_vec())
            .collect()
    }

    fn logf(&self) -> Vec<f64> {
        self.inner.logf.clone()
    }

    fn positions(&self) -> Vec<f64> {
        self.inner.positions.clone()
    }

    /// (rho, u, T, E, H) of the ensemble.
    fn moments(&self) -> PyResult<(f64, Vec<f64>, f64, f64, f64)> {
        let m = ensemble::moments(
            &self.inner.velocities,
            self.inner.d_v,
            self.inner.weight,
            &self.inner.logf,
        )
        .map_err(to_py_err)?;
        Ok((m.rho, m.u, m.temperature, m.energy, m.entropy))
    }

    /// Particle L1 distance to the ensemble's own local Maxwellian.
    fn l1_to_maxwellian(&self) -> PyResult<f64> {
        kernels::l1_to_maxwellian(
            &self.inner.velocities,
            &self.inner.logf,
            self.inner.d_v,
            self.inner.weight,
        )
        .map_err(to_py_err)
    }
}

/// Sample the bi-Maxwellian relaxation initial data (0D-2V).
#[pyfunction]
fn bi_maxwellian(n_particles: usize, seed: u64) -> PyResult<ParticleEnsemble> {
    let spec = ensemble::bi_maxwellian_spec(n_particles);
    let inner = ensemble::sample_initial(&spec, seed).map_err(to_py_err)?;
    Ok(ParticleEnsemble { inner })
}

/// Sample centered Gaussian particles (the heat-lab initial data).
#[pyfunction]
fn gaussian(n_particles: usize, d_v: usize, sigma: f64, seed: u64) -> ParticleEnsemble {
    ParticleEnsemble {
        inner: heatlab::gaussian_particles(n_particles, d_v, sigma, seed),
    }
}

/// The Landau matrix kernel A(z) for interaction exponent gamma.
#[pyfunction]
#[pyo3(signature = (z, gamma = -3.0))]
fn landau_a(z: Vec<f64>, gamma: f64) -> Vec<Vec<f64>> {
    let d = z.len();
    let params = kernels::KernelParams::new(gamma, d);
    let flat = kernels::landau_a_mat(&z, &params);
    flat.chunks(d).map(|r| r.to_vec()).collect()
}

/// Local Maxwellian rho (2 pi T)^(-d/2) exp(-|v-u|^2 / 2T).
#[pyfunction]
fn maxwellian(rho: f64, u: Vec<f64>, temperature: f64, v: Vec<f64>) -> PyResult<f64> {
    let m = ensemble::MacroMoments {
        rho,
        u,
        temperature,
        energy: 0.0,
        entropy: 0.0,
        count: 0,
    };
    kernels::maxwellian(&m, &v).map_err(to_py_err)
}

/// Gauss-Legendre nodes and weights on [0, 1].
#[pyfunction]
fn gauss_legendre(k: usize) -> PyResult<(Vec<f64>, Vec<f64>)> {
    let rule = apjko_core::innertime::gauss_legendre(k).map_err(to_py_err)?;
    Ok((rule.nodes, rule.weights))
}

/// Exact post-step standard deviation of the Gaussian heat-equation JKO step.
#[pyfunction]
fn gaussian_jko_std_oracle(sigma0: f64, alpha: f64) -> f64 {
    heatlab::gaussian_jko_std_oracle(sigma0, alpha)
}

/// One implicit variational collision step applied in place.
/// Returns (initial_full_loss, final_full_loss).
#[pyfunction]
#[pyo3(signature = (
    ensemble, operator = "landau", epsilon = 1.0, dt = 0.01, gamma = -3.0,
    quadrature = 5, solver = "rk4", batch_size = None,
    eta_max = 1e-2, eta_min = 1e-3, t0 = 20, t_max = 100,
    layers = 5, width = 32, seed = 0
))]
#[allow(clippy::too_many_arguments)]
fn collision_step(
    ensemble: &mut ParticleEnsemble,
    operator: &str,
    epsilon: f64,
    dt: f64,
    gamma: f64,
    quadrature: usize,
    solver: &str,
    batch_size: Option<usize>,
    eta_max: f64,
    eta_min: f64,
    t0: usize,
    t_max: usize,
    layers: usize,
    width: usize,
    seed: u64,
) -> PyResult<(f64, f64)> {
    let operator = match operator {
        "landau" => OperatorKind::Landau {
            gamma,
            r_cut: 1e-8,
        },
        "dougherty" | "dougherty_projected" => OperatorKind::DoughertyProjected,
        "dougherty_wgf" => OperatorKind::DoughertyWgf,
        other => {
            return Err(PyValueError::new_err(format!(
                "unknown operator `{other}`"
            )))
        }
    };
    let solver = match solver {
        "rk4" => SolverKind::Rk4,
        "imrk2" | "implicit_midpoint" => SolverKind::ImplicitMidpoint,
        other => return Err(PyValueError::new_err(format!("unknown solver `{other}`"))),
    };
    let cfg = CollisionConfig {
        operator,
        epsilon,
        dt,
        quadrature,
        solver,
        batch_size,
        schedule: TrainingSchedule {
            eta_max,
            eta_min,
            t0,
            t_max,
        },
        warm_start: true,
        broyden: BroydenConfig::default(),
        track_full_loss: true,
    };
    let d_v = ensemble.inner.d_v;
    let mut field = VelocityField::init(d_v, layers, width, seed).map_err(to_py_err)?;
    let wtilde = ensemble.inner.weight;
    let report = jko::collision_step(
        &mut ensemble.inner.velocities,
        &mut ensemble.inner.logf,
        &mut field,
        wtilde,
        &cfg,
        seed,
    )
    .map_err(to_py_err)?;
    Ok((report.initial_full_loss.unwrap_or(f64::NAN), report.final_full_loss))
}

/// Exact Riemann profile rows (x, rho, u, T) at the given time.
#[pyfunction]
#[pyo3(signature = (
    rho_left, t_left, rho_right, t_right, time,
    u_left = 0.0, u_right = 0.0, d_v = 3, n_points = 100, x0 = 0.5
))]
#[allow(clippy::too_many_arguments)]
fn exact_riemann_profile(
    rho_left: f64,
    t_left: f64,
    rho_right: f64,
    t_right: f64,
    time: f64,
    u_left: f64,
    u_right: f64,
    d_v: usize,
    n_points: usize,
    x0: f64,
) -> PyResult<Vec<(f64, f64, f64, f64)>> {
    let gamma = riemann::gas_gamma(d_v);
    let left = riemann::EulerState {
        rho: rho_left,
        u: u_left,
        p: rho_left * t_left,
    };
    let right = riemann::EulerState {
        rho: rho_right,
        u: u_right,
        p: rho_right * t_right,
    };
    let solution = riemann::exact_riemann(left, right, gamma).map_err(to_py_err)?;
    Ok((0..n_points)
        .map(|k| {
            let x = (k as f64 + 0.5) / n_points as f64;
            let s = solution.sample((x - x0) / time);
            (x, s.rho, s.u, s.temperature())
        })
        .collect())
}

/// Run a TOML experiment config; returns the output directory.
#[pyfunction]
#[pyo3(signature = (config_path, seed = None, threads = None, out = None))]
fn run_config(
    config_path: PathBuf,
    seed: Option<u64>,
    threads: Option<usize>,
    out: Option<PathBuf>,
) -> PyResult<String> {
    let artifacts =
        runner::run_file(&config_path, seed, threads, None, out).map_err(to_py_err)?;
    Ok(artifacts.out_dir.display().to_string())
}

#[pymodule]
fn apjko(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<ParticleEnsemble>()?;
    m.add_function(wrap_pyfunction!(bi_maxwellian, m)?)?;
    m.add_function(wrap_pyfunction!(gaussian, m)?)?;
    m.add_function(wrap_pyfunction!(landau_a, m)?)?;
    m.add_function(wrap_pyfunction!(maxwellian, m)?)?;
    m.add_function(wrap_pyfunction!(gauss_legendre, m)?)?;
    m.add_function(wrap_pyfunction!(gaussian_jko_std_oracle, m)?)?;
    m.add_function(wrap_pyfunction!(collision_step, m)?)?;
    m.add_function(wrap_pyfunction!(exact_riemann_profile, m)?)?;
    m.add_function(wrap_pyfunction!(run_config, m)?)?;
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    Ok(())
}
