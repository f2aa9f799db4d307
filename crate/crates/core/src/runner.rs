//! Configuration-driven experiment runner: reproduces the test suite at desk
//! scale with deterministic seeding, CSV diagnostics, and checkpointing.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::config::{ExperimentKind, Precision, RunConfig};
use crate::ensemble::{sample_initial, CellPartition, ParticleEnsemble};
use crate::error::{Error, Result};
use crate::heatlab::{
    self, esm_linear_update, esm_step, gaussian_jko_std_oracle, gaussian_particles,
    heat_jko_step, ism_fixed_point_step, ism_linear_slope, jko_linear_slope,
    optimality_residuals, sample_std, HeatTrainCfg,
};
use crate::jko::TrainingSchedule;
use crate::kernels::l1_to_maxwellian;
use crate::riemann::{exact_riemann, gas_gamma, EulerState};
use crate::splitting::{
    self, cell_profiles, derive_seed, RunState, SplittingConfig, StepOutcome,
};

/// Quantize a slice through f32 storage (the `--precision f32` mode keeps
/// f64 arithmetic but stores state in single precision between phases).
fn quantize(values: &mut [f64]) {
    for v in values {
        *v = *v as f32 as f64;
    }
}

fn quantize_ensemble(ensemble: &mut ParticleEnsemble) {
    quantize(&mut ensemble.positions);
    quantize(&mut ensemble.velocities);
    quantize(&mut ensemble.logf);
}

struct CsvFile {
    buffer: String,
    path: PathBuf,
}

impl CsvFile {
    fn new(dir: &Path, name: &str, header: &str) -> Self {
        CsvFile {
            buffer: format!("{header}\n"),
            path: dir.join(name),
        }
    }

    fn row(&mut self, fields: &[String]) {
        let _ = writeln!(self.buffer, "{}", fields.join(","));
    }

    fn finish(self) -> Result<()> {
        fs::write(&self.path, self.buffer)?;
        Ok(())
    }
}

fn fmt(x: f64) -> String {
    format!("{x:?}")
}

/// Resolved run artifacts.
pub struct RunArtifacts {
    pub out_dir: PathBuf,
}

/// Execute a validated configuration, writing all artifacts under `out_dir`.
pub fn run(cfg: &RunConfig, out_dir: &Path) -> Result<RunArtifacts> {
    cfg.validate()?;
    fs::create_dir_all(out_dir)?;
    write_metadata(cfg, out_dir)?;
    match cfg.kind {
        ExperimentKind::Homogeneous => run_kinetic(cfg, out_dir, false),
        ExperimentKind::Inhomogeneous => run_kinetic(cfg, out_dir, true),
        ExperimentKind::Heatlab => run_heatlab(cfg, out_dir),
        ExperimentKind::Riemann => run_riemann(cfg, out_dir),
    }?;
    Ok(RunArtifacts {
        out_dir: out_dir.to_path_buf(),
    })
}

/// Resolved config, seed, and versions: enough to re-execute the run.
fn write_metadata(cfg: &RunConfig, out_dir: &Path) -> Result<()> {
    let resolved = toml::to_string_pretty(cfg)
        .map_err(|e| Error::Config {
            path: "<metadata>".into(),
            msg: e.to_string(),
        })?;
    let meta = format!(
        "# run metadata\nversion = {:?}\nthreads_resolved = {}\n\n{resolved}",
        env!("CARGO_PKG_VERSION"),
        rayon::current_num_threads(),
    );
    fs::write(out_dir.join("run_metadata.toml"), meta)?;
    Ok(())
}

fn diagnostics_header(d_v: usize) -> String {
    let mut h = String::from("step,time,rho_tot,ux_tot");
    if d_v >= 2 {
        h.push_str(",uy_tot");
    }
    if d_v >= 3 {
        h.push_str(",uz_tot");
    }
    h.push_str(",E_tot,H_tot");
    h
}

fn diagnostics_row(diag: &splitting::GlobalDiagnostics) -> Vec<String> {
    let mut row = vec![
        diag.step.to_string(),
        fmt(diag.time),
        fmt(diag.rho_tot),
    ];
    for p in &diag.momentum {
        row.push(fmt(*p));
    }
    row.push(fmt(diag.energy));
    row.push(fmt(diag.entropy));
    row
}

/// Marginal velocity histograms: 64 uniform bins over [-5 sigma, 5 sigma]
/// per axis, normalized to unit mass.
fn write_histograms(ensemble: &ParticleEnsemble, dir: &Path, step: usize) -> Result<()> {
    let d = ensemble.d_v;
    let n = ensemble.len();
    for axis in 0..d {
        let mut mean = 0.0;
        for i in 0..n {
            mean += ensemble.velocities[i * d + axis];
        }
        mean /= n as f64;
        let mut var = 0.0;
        for i in 0..n {
            let dv = ensemble.velocities[i * d + axis] - mean;
            var += dv * dv;
        }
        let sigma = (var / n as f64).sqrt().max(1e-12);
        let lo = mean - 5.0 * sigma;
        let hi = mean + 5.0 * sigma;
        let bins = 64usize;
        let width = (hi - lo) / bins as f64;
        let mut counts = vec![0usize; bins];
        for i in 0..n {
            let v = ensemble.velocities[i * d + axis];
            if v >= lo && v < hi {
                counts[((v - lo) / width) as usize] += 1;
            }
        }
        let mut csv = CsvFile::new(
            dir,
            &format!("hist_step{step}_axis{axis}.csv"),
            "bin_center,density",
        );
        for (b, c) in counts.iter().enumerate() {
            let center = lo + (b as f64 + 0.5) * width;
            let density = *c as f64 / (n as f64 * width);
            csv.row(&[fmt(center), fmt(density)]);
        }
        csv.finish()?;
    }
    Ok(())
}

fn write_profiles(
    ensemble: &ParticleEnsemble,
    partition: &CellPartition,
    dir: &Path,
    step: usize,
) -> Result<()> {
    let profiles = cell_profiles(ensemble, partition)?;
    let d = ensemble.d_v;
    let mut header = String::from("cell_center,rho,ux");
    if d >= 2 {
        header.push_str(",uy");
    }
    if d >= 3 {
        header.push_str(",uz");
    }
    header.push_str(",T");
    let mut csv = CsvFile::new(dir, &format!("profiles_step{step}.csv"), &header);
    for p in &profiles {
        let mut row = vec![fmt(p.center), fmt(p.rho)];
        for a in 0..d {
            row.push(fmt(p.u[a]));
        }
        row.push(fmt(p.temperature));
        csv.row(&row);
    }
    csv.finish()
}

/// Homogeneous and inhomogeneous kinetic runs share the splitting driver;
/// homogeneous runs use a single unit-width pseudo-cell and no transport.
fn run_kinetic(cfg: &RunConfig, out_dir: &Path, inhomogeneous: bool) -> Result<()> {
    let init = cfg.init.as_ref().expect("validated");
    let run = cfg.run.as_ref().expect("validated");
    let collision_section = cfg.collision.as_ref().expect("validated");
    let space = cfg.space.as_ref();
    let spec = cfg.build_init_spec(init, if inhomogeneous { space } else { None })?;
    let mut ensemble = sample_initial(&spec, cfg.seed)?;
    if cfg.precision == Precision::F32 {
        quantize_ensemble(&mut ensemble);
    }

    let partition = if inhomogeneous {
        let s = space.expect("validated");
        CellPartition::uniform(s.domain[0], s.domain[1], s.n_cells)?
    } else {
        CellPartition::uniform(0.0, 1.0, 1)?
    };

    let split_cfg = SplittingConfig {
        collision: collision_section.collision_config(),
        bc: space.map(|s| s.bc).unwrap_or(splitting::BoundaryKind::Periodic),
        epsilon: collision_section.epsilon,
        field_shape: cfg.field_shape(),
        seed: cfg.seed,
    };

    let mut state = RunState::new(ensemble, partition);
    let mut diag_csv = CsvFile::new(out_dir, "diagnostics.csv", &diagnostics_header(init.d_v));
    diag_csv.row(&diagnostics_row(&state.history[0]));
    let mut relax_csv = if !inhomogeneous {
        let mut c = CsvFile::new(out_dir, "relaxation.csv", "step,time,l1_to_maxwellian");
        let l1 = l1_to_maxwellian(
            &state.ensemble.velocities,
            &state.ensemble.logf,
            init.d_v,
            state.ensemble.weight,
        )?;
        c.row(&["0".into(), fmt(0.0), fmt(l1)]);
        Some(c)
    } else {
        None
    };
    let mut training_csv = if split_cfg.collision.track_full_loss {
        Some(CsvFile::new(
            out_dir,
            "training.csv",
            "step,cell,iter,epoch,batch_loss,full_loss",
        ))
    } else {
        None
    };

    if run.snapshot_steps.contains(&0) {
        write_histograms(&state.ensemble, out_dir, 0)?;
        if inhomogeneous {
            write_profiles(&state.ensemble, &state.partition, out_dir, 0)?;
        }
    }

    for step_no in 1..=run.n_steps {
        let StepOutcome {
            diagnostics,
            reports,
        } = splitting::step(&mut state, &split_cfg)?;
        if cfg.precision == Precision::F32 {
            quantize_ensemble(&mut state.ensemble);
            for field in state.fields.iter_mut().flatten() {
                field.quantize_f32();
            }
        }
        diag_csv.row(&diagnostics_row(&diagnostics));
        if let Some(c) = relax_csv.as_mut() {
            let l1 = l1_to_maxwellian(
                &state.ensemble.velocities,
                &state.ensemble.logf,
                init.d_v,
                state.ensemble.weight,
            )?;
            c.row(&[step_no.to_string(), fmt(diagnostics.time), fmt(l1)]);
        }
        if let Some(c) = training_csv.as_mut() {
            for (cell, report) in &reports {
                for point in &report.curve {
                    c.row(&[
                        step_no.to_string(),
                        cell.to_string(),
                        point.iter.to_string(),
                        point.epoch.to_string(),
                        fmt(point.batch_loss),
                        point.full_loss.map(fmt).unwrap_or_default(),
                    ]);
                }
            }
        }
        if run.snapshot_steps.contains(&step_no) {
            write_histograms(&state.ensemble, out_dir, step_no)?;
            if inhomogeneous {
                write_profiles(&state.ensemble, &state.partition, out_dir, step_no)?;
            }
        }
    }

    // final per-cell field checkpoints for reproducible warm starts
    let ckpt_dir = out_dir.join("checkpoints");
    fs::create_dir_all(&ckpt_dir)?;
    for (l, field) in state.fields.iter().enumerate() {
        if let Some(f) = field {
            f.save_checkpoint(&ckpt_dir.join(format!("cell_{l}.ckpt")))?;
        }
    }

    diag_csv.finish()?;
    if let Some(c) = relax_csv {
        c.finish()?;
    }
    if let Some(c) = training_csv {
        c.finish()?;
    }
    Ok(())
}

/// The heat-lab sweep: one comparison row per (method, alpha).
fn run_heatlab(cfg: &RunConfig, out_dir: &Path) -> Result<()> {
    let lab = cfg.heatlab.as_ref().expect("validated");
    let mut csv = CsvFile::new(
        out_dir,
        "comparison.csv",
        "method,alpha,sigma0,post_std,oracle_std,opt_det_residual",
    );
    for (ai, &alpha) in lab.alphas.iter().enumerate() {
        let oracle = gaussian_jko_std_oracle(lab.sigma0, alpha);
        for (mi, method) in lab.methods.iter().enumerate() {
            let seed = derive_seed(cfg.seed, &[ai as u64, mi as u64]);
            let mut particles =
                gaussian_particles(lab.n_particles, lab.d_v, lab.sigma0, seed);
            let initial = particles.velocities.clone();
            let train_cfg = HeatTrainCfg {
                schedule: TrainingSchedule {
                    eta_max: lab.eta_max,
                    eta_min: lab.eta_min,
                    t0: lab.t_max,
                    t_max: lab.t_max,
                },
                quadrature: lab.quadrature,
                ..HeatTrainCfg::default()
            };
            let outcome: Result<()> = (|| {
                match method.as_str() {
                    "esm" => {
                        let mut field = heatlab::lab_field(lab.d_v, seed ^ 1);
                        esm_step(&mut particles, &mut field, alpha, &train_cfg)?;
                    }
                    "ism" => {
                        let mut field = heatlab::lab_field(lab.d_v, seed ^ 2);
                        ism_fixed_point_step(&mut particles, &mut field, alpha, &train_cfg)?;
                    }
                    "jko" => {
                        let mut field = heatlab::lab_field(lab.d_v, seed ^ 3);
                        heat_jko_step(
                            &mut particles,
                            &mut field,
                            alpha,
                            lab.quadrature,
                            &train_cfg,
                        )?;
                    }
                    "esm_linear" => {
                        let mean = vec![0.0; lab.d_v];
                        esm_linear_update(
                            &mut particles,
                            &mean,
                            lab.sigma0 * lab.sigma0,
                            alpha,
                        );
                    }
                    "ism_linear" => {
                        let lam = ism_linear_slope(alpha, lab.sigma0);
                        for v in particles.velocities.iter_mut() {
                            *v *= lam;
                        }
                    }
                    "jko_linear" => {
                        let lam = jko_linear_slope(alpha, lab.sigma0);
                        for v in particles.velocities.iter_mut() {
                            *v *= lam;
                        }
                    }
                    _ => unreachable!("validated"),
                }
                Ok(())
            })();
            let (post_std, residual) = match outcome {
                Ok(()) => {
                    let res =
                        optimality_residuals(&initial, &particles.velocities, lab.d_v, alpha);
                    (sample_std(&particles.velocities, lab.d_v), res.det)
                }
                Err(e) => {
                    // divergence is a reportable lab outcome, not a run failure
                    eprintln!("heatlab {method} at alpha={alpha} failed: {e}");
                    (f64::NAN, f64::NAN)
                }
            };
            csv.row(&[
                method.clone(),
                fmt(alpha),
                fmt(lab.sigma0),
                fmt(post_std),
                fmt(oracle),
                fmt(residual),
            ]);
        }
    }
    csv.finish()
}

/// Emit the exact self-similar Riemann profiles for plotting overlays.
fn run_riemann(cfg: &RunConfig, out_dir: &Path) -> Result<()> {
    let r = cfg.riemann.as_ref().expect("validated");
    let gamma = gas_gamma(r.d_v);
    let left = EulerState {
        rho: r.rho_left,
        u: r.u_left,
        p: r.rho_left * r.t_left,
    };
    let right = EulerState {
        rho: r.rho_right,
        u: r.u_right,
        p: r.rho_right * r.t_right,
    };
    let solution = exact_riemann(left, right, gamma)?;
    let mut csv = CsvFile::new(out_dir, "exact_profile.csv", "x,rho,u,T");
    for k in 0..r.n_points {
        let x = r.domain[0]
            + (r.domain[1] - r.domain[0]) * (k as f64 + 0.5) / r.n_points as f64;
        let s = solution.sample((x - r.x0) / r.time);
        csv.row(&[fmt(x), fmt(s.rho), fmt(s.u), fmt(s.temperature())]);
    }
    csv.finish()
}

/// Load, validate, and run a config file with CLI overrides applied.
pub fn run_file(
    path: &Path,
    seed: Option<u64>,
    threads: Option<usize>,
    precision: Option<Precision>,
    out: Option<PathBuf>,
) -> Result<RunArtifacts> {
    let mut cfg = RunConfig::load(path)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(t) = threads {
        cfg.threads = t;
    }
    if let Some(p) = precision {
        cfg.precision = p;
    }
    if let Some(o) = out {
        cfg.out = Some(o);
    }
    if cfg.threads > 0 {
        // ignore the error if a pool already exists (tests, repeated calls)
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.threads)
            .build_global();
    }
    let out_dir = cfg
        .out
        .clone()
        .unwrap_or_else(|| PathBuf::from("runs/latest"));
    run(&cfg, &out_dir)
}
