//! First-order operator splitting for the inhomogeneous equation: exact free
//! transport, boundary handling, binning, per-cell implicit collision, and
//! global diagnostics.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ensemble::{self, CellPartition, ParticleEnsemble};
use crate::error::{Error, Result};
use crate::field::VelocityField;
use crate::jko::{collision_step, CollisionConfig};

/// Spatial boundary condition.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoundaryKind {
    Periodic,
    Reflecting,
}

/// Knudsen number as a function of position.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EpsilonProfile {
    Constant { value: f64 },
    /// The mixing-regime profile: eps0 + (tanh(5-10x) + tanh(5+10x))/2 for
    /// x <= 0.3, eps0 beyond.
    TanhMix { eps0: f64 },
}

impl EpsilonProfile {
    pub fn eval(&self, x: f64) -> f64 {
        match self {
            EpsilonProfile::Constant { value } => *value,
            EpsilonProfile::TanhMix { eps0 } => {
                if x <= 0.3 {
                    eps0 + 0.5 * ((5.0 - 10.0 * x).tanh() + (5.0 + 10.0 * x).tanh())
                } else {
                    *eps0
                }
            }
        }
    }
}

/// Deterministic seed derivation for independent RNG streams
/// (splitmix64 chain over the context words).
pub fn derive_seed(base: u64, parts: &[u64]) -> u64 {
    let mut x = base;
    for &p in parts {
        x = x.wrapping_add(0x9E3779B97F4A7C15).wrapping_add(p);
        let mut z = x;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
        x = z ^ (z >> 31);
    }
    x
}

/// Exact free transport: x_i <- x_i + dt * v_{x,i}. Velocities and
/// log-densities are untouched, so f*(x*, v*) = f^n(x, v) by construction.
pub fn transport(ensemble: &mut ParticleEnsemble, dt: f64) {
    if ensemble.d_x == 0 {
        return;
    }
    let d = ensemble.d_v;
    for (i, x) in ensemble.positions.iter_mut().enumerate() {
        *x += dt * ensemble.velocities[i * d];
    }
}

/// Apply the spatial boundary condition. Periodic wraps by the domain length
/// with the velocity unchanged; reflecting mirrors the position and negates
/// every velocity component. Overshoot beyond one domain length is an error.
pub fn apply_bc(
    ensemble: &mut ParticleEnsemble,
    kind: BoundaryKind,
    lo: f64,
    hi: f64,
) -> Result<()> {
    if ensemble.d_x == 0 {
        return Ok(());
    }
    let span = hi - lo;
    let d = ensemble.d_v;
    for i in 0..ensemble.len() {
        let x = ensemble.positions[i];
        let new_x = match kind {
            BoundaryKind::Periodic => {
                if x < lo {
                    x + span
                } else if x > hi {
                    x - span
                } else {
                    x
                }
            }
            BoundaryKind::Reflecting => {
                if x < lo {
                    for a in 0..d {
                        ensemble.velocities[i * d + a] = -ensemble.velocities[i * d + a];
                    }
                    lo - (x - lo)
                } else if x > hi {
                    for a in 0..d {
                        ensemble.velocities[i * d + a] = -ensemble.velocities[i * d + a];
                    }
                    hi - (x - hi)
                } else {
                    x
                }
            }
        };
        if new_x < lo || new_x > hi {
            return Err(Error::OutOfDomain { x: new_x, lo, hi });
        }
        ensemble.positions[i] = new_x;
    }
    Ok(())
}

/// Global sums of one ensemble: (rho_tot, momentum, E_tot, H_tot).
#[derive(Debug, Clone)]
pub struct GlobalDiagnostics {
    pub step: usize,
    pub time: f64,
    pub rho_tot: f64,
    /// Total momentum w sum_i v_i per axis.
    pub momentum: Vec<f64>,
    /// Total energy (w/2) sum_i |v_i|^2.
    pub energy: f64,
    /// Total entropy w sum_i logf_i.
    pub entropy: f64,
}

pub fn global_diagnostics(ensemble: &ParticleEnsemble, step: usize, time: f64) -> GlobalDiagnostics {
    let d = ensemble.d_v;
    let w = ensemble.weight;
    let mut momentum = vec![0.0; d];
    let mut e = 0.0;
    for i in 0..ensemble.len() {
        for a in 0..d {
            let v = ensemble.velocities[i * d + a];
            momentum[a] += v;
            e += v * v;
        }
    }
    for p in momentum.iter_mut() {
        *p *= w;
    }
    GlobalDiagnostics {
        step,
        time,
        rho_tot: w * ensemble.len() as f64,
        momentum,
        energy: 0.5 * w * e,
        entropy: w * ensemble.logf.iter().sum::<f64>(),
    }
}

/// Per-cell macroscopic profile for plotting. Empty cells report zero
/// density with zeroed (omitted) velocity and temperature.
#[derive(Debug, Clone)]
pub struct CellProfile {
    pub center: f64,
    pub rho: f64,
    pub u: Vec<f64>,
    pub temperature: f64,
    pub entropy: f64,
    pub count: usize,
}

pub fn cell_profiles(
    ensemble: &ParticleEnsemble,
    partition: &CellPartition,
) -> Result<Vec<CellProfile>> {
    let binning = ensemble::bin(ensemble, partition)?;
    let d = ensemble.d_v;
    let mut profiles = Vec::with_capacity(partition.n_cells());
    for l in 0..partition.n_cells() {
        let idx = &binning.cells[l];
        if idx.is_empty() {
            profiles.push(CellProfile {
                center: partition.center(l),
                rho: 0.0,
                u: vec![0.0; d],
                temperature: 0.0,
                entropy: 0.0,
                count: 0,
            });
            continue;
        }
        let mut v = vec![0.0; idx.len() * d];
        let mut lf = vec![0.0; idx.len()];
        for (row, &i) in idx.iter().enumerate() {
            v[row * d..(row + 1) * d].copy_from_slice(ensemble.velocity(i));
            lf[row] = ensemble.logf[i];
        }
        let m = ensemble::moments(&v, d, binning.wtilde[l], &lf)?;
        profiles.push(CellProfile {
            center: partition.center(l),
            rho: m.rho,
            u: m.u,
            temperature: m.temperature,
            entropy: m.entropy,
            count: idx.len(),
        });
    }
    Ok(profiles)
}

/// Architecture of the per-cell velocity fields.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct FieldShape {
    pub layers: usize,
    pub width: usize,
}

impl Default for FieldShape {
    fn default() -> Self {
        FieldShape {
            layers: 5,
            width: 32,
        }
    }
}

/// Full inhomogeneous run configuration (collision step plus space handling).
#[derive(Debug, Clone)]
pub struct SplittingConfig {
    pub collision: CollisionConfig,
    pub bc: BoundaryKind,
    pub epsilon: EpsilonProfile,
    pub field_shape: FieldShape,
    pub seed: u64,
}

/// The evolving state of a run: the ensemble, per-cell warm-start fields,
/// and per-step diagnostic records.
#[derive(Debug)]
pub struct RunState {
    pub ensemble: ParticleEnsemble,
    pub partition: CellPartition,
    pub step_index: usize,
    pub time: f64,
    pub fields: Vec<Option<VelocityField>>,
    pub history: Vec<GlobalDiagnostics>,
}

impl RunState {
    pub fn new(ensemble: ParticleEnsemble, partition: CellPartition) -> Self {
        let n_cells = partition.n_cells();
        let init = global_diagnostics(&ensemble, 0, 0.0);
        RunState {
            ensemble,
            partition,
            step_index: 0,
            time: 0.0,
            fields: vec![None; n_cells],
            history: vec![init],
        }
    }
}

/// Results of one splitting step.
#[derive(Debug, Clone)]
pub struct StepOutcome {
    pub diagnostics: GlobalDiagnostics,
    /// Per-cell collision reports in cell order.
    pub reports: Vec<(usize, crate::jko::CollisionReport)>,
}

/// One splitting step: transport, boundary handling, binning, independent
/// per-cell implicit collision solves, write-back, diagnostics.
pub fn step(state: &mut RunState, cfg: &SplittingConfig) -> Result<StepOutcome> {
    let dt = cfg.collision.dt;
    let d = state.ensemble.d_v;
    let step_idx = state.step_index;

    // CFL-style overshoot guard: one wrap/reflection at most
    if state.ensemble.d_x >= 1 {
        let lo = state.partition.boundaries[0];
        let hi = *state.partition.boundaries.last().unwrap();
        let vmax = state
            .ensemble
            .velocities
            .chunks(d)
            .map(|v| v[0].abs())
            .fold(0.0, f64::max);
        if dt * vmax >= hi - lo {
            return Err(Error::Domain(format!(
                "transport overshoot: dt * max|v_x| = {} exceeds the domain length {}",
                dt * vmax,
                hi - lo
            )));
        }
        transport(&mut state.ensemble, dt);
        apply_bc(&mut state.ensemble, cfg.bc, lo, hi)?;
    }

    // binning (homogeneous runs use a single unit-width pseudo-cell)
    let (cells, wtilde) = if state.ensemble.d_x == 0 {
        (
            vec![(0..state.ensemble.len()).collect::<Vec<_>>()],
            vec![state.ensemble.weight],
        )
    } else {
        let binning = ensemble::bin(&state.ensemble, &state.partition)?;
        (binning.cells, binning.wtilde)
    };

    // collect per-cell work, train concurrently, write back in cell order
    struct CellTask {
        cell: usize,
        idx: Vec<usize>,
        velocities: Vec<f64>,
        logf: Vec<f64>,
        field: VelocityField,
        wtilde: f64,
        epsilon: f64,
        seed: u64,
        report: Option<crate::jko::CollisionReport>,
    }

    let mut tasks = Vec::new();
    for (l, idx) in cells.iter().enumerate() {
        if idx.is_empty() {
            continue;
        }
        let mut velocities = vec![0.0; idx.len() * d];
        let mut logf = vec![0.0; idx.len()];
        for (row, &i) in idx.iter().enumerate() {
            velocities[row * d..(row + 1) * d].copy_from_slice(state.ensemble.velocity(i));
            logf[row] = state.ensemble.logf[i];
        }
        let field = match (cfg.collision.warm_start, state.fields[l].take()) {
            (true, Some(f)) => f,
            _ => VelocityField::init(
                d,
                cfg.field_shape.layers,
                cfg.field_shape.width,
                derive_seed(cfg.seed, &[1, step_idx as u64, l as u64]),
            )?,
        };
        let center = if state.ensemble.d_x == 0 {
            0.0
        } else {
            state.partition.center(l)
        };
        tasks.push(CellTask {
            cell: l,
            idx: idx.clone(),
            velocities,
            logf,
            field,
            wtilde: wtilde[l],
            epsilon: cfg.epsilon.eval(center),
            seed: derive_seed(cfg.seed, &[2, step_idx as u64, l as u64]),
            report: None,
        });
    }

    let results: Vec<Result<CellTask>> = tasks
        .into_par_iter()
        .map(|mut task| {
            let mut cell_cfg = cfg.collision;
            cell_cfg.epsilon = task.epsilon;
            let report = collision_step(
                &mut task.velocities,
                &mut task.logf,
                &mut task.field,
                task.wtilde,
                &cell_cfg,
                task.seed,
            )
            .map_err(|e| Error::Cell {
                cell: task.cell,
                step: step_idx,
                source: Box::new(e),
            })?;
            task.report = Some(report);
            Ok(task)
        })
        .collect();

    let mut reports = Vec::new();
    for result in results {
        let task = result?;
        for (row, &i) in task.idx.iter().enumerate() {
            state.ensemble.velocities[i * d..(i + 1) * d]
                .copy_from_slice(&task.velocities[row * d..(row + 1) * d]);
            state.ensemble.logf[i] = task.logf[row];
        }
        state.fields[task.cell] = Some(task.field);
        if let Some(report) = task.report {
            reports.push((task.cell, report));
        }
    }
    reports.sort_by_key(|(cell, _)| *cell);

    state.step_index += 1;
    state.time = state.step_index as f64 * dt;
    let diag = global_diagnostics(&state.ensemble, state.step_index, state.time);
    state.history.push(diag.clone());
    Ok(StepOutcome {
        diagnostics: diag,
        reports,
    })
}
