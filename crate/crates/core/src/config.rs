//! Run configuration: a TOML schema with flat keys and one nesting level,
//! validated fully before any compute starts.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::ensemble::{DensityProfile, InitSpec, SpatialSpec, VelocityLaw};
use crate::error::{Error, Result};
use crate::innertime::{BroydenConfig, SolverKind};
use crate::jko::{CollisionConfig, OperatorKind, TrainingSchedule};
use crate::splitting::{BoundaryKind, EpsilonProfile, FieldShape};

/// Floating-point storage mode. f32 keeps the f64 kernels but rounds the
/// particle state and field parameters through f32 at step boundaries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    #[default]
    F64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    Homogeneous,
    Inhomogeneous,
    Heatlab,
    Riemann,
}

/// `[init]` — initial condition.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InitSection {
    pub d_v: usize,
    pub n_particles: usize,
    pub velocity: VelocityLaw,
}

/// `[space]` — domain, partition, boundary condition, spatial density.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SpaceSection {
    pub domain: [f64; 2],
    pub n_cells: usize,
    pub bc: BoundaryKind,
    pub rho: DensityProfile,
}

/// `[collision]` — operator, stiffness, step size, inner solver, training.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CollisionSection {
    pub operator: OperatorKind,
    pub epsilon: EpsilonProfile,
    pub dt: f64,
    #[serde(default = "default_quadrature")]
    pub quadrature: usize,
    #[serde(default = "default_solver")]
    pub solver: SolverKind,
    #[serde(default)]
    pub batch_size: Option<usize>,
    pub eta_max: f64,
    pub eta_min: f64,
    pub t0: usize,
    pub t_max: usize,
    #[serde(default = "default_true")]
    pub warm_start: bool,
    #[serde(default)]
    pub track_full_loss: bool,
    #[serde(default = "default_broyden_tol")]
    pub broyden_tol: f64,
    #[serde(default = "default_broyden_max_iters")]
    pub broyden_max_iters: usize,
}

fn default_quadrature() -> usize {
    5
}
fn default_solver() -> SolverKind {
    SolverKind::Rk4
}
fn default_true() -> bool {
    true
}
fn default_broyden_tol() -> f64 {
    1e-6
}
fn default_broyden_max_iters() -> usize {
    50
}

impl CollisionSection {
    pub fn collision_config(&self) -> CollisionConfig {
        CollisionConfig {
            operator: self.operator,
            epsilon: match self.epsilon {
                EpsilonProfile::Constant { value } => value,
                EpsilonProfile::TanhMix { eps0 } => eps0,
            },
            dt: self.dt,
            quadrature: self.quadrature,
            solver: self.solver,
            batch_size: self.batch_size,
            schedule: TrainingSchedule {
                eta_max: self.eta_max,
                eta_min: self.eta_min,
                t0: self.t0,
                t_max: self.t_max,
            },
            warm_start: self.warm_start,
            broyden: BroydenConfig {
                tol: self.broyden_tol,
                max_iters: self.broyden_max_iters,
                ..BroydenConfig::default()
            },
            track_full_loss: self.track_full_loss,
        }
    }
}

/// `[run]` — outer loop length and snapshot schedule.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunSection {
    pub n_steps: usize,
    #[serde(default)]
    pub snapshot_steps: Vec<usize>,
}

/// `[heatlab]` — the stiffness-laboratory sweep.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HeatLabSection {
    pub alphas: Vec<f64>,
    #[serde(default = "default_sigma0")]
    pub sigma0: f64,
    #[serde(default = "default_one")]
    pub d_v: usize,
    pub n_particles: usize,
    pub methods: Vec<String>,
    #[serde(default = "default_quadrature")]
    pub quadrature: usize,
    #[serde(default = "default_heat_eta_max")]
    pub eta_max: f64,
    #[serde(default = "default_heat_eta_min")]
    pub eta_min: f64,
    #[serde(default = "default_heat_t_max")]
    pub t_max: usize,
}

fn default_sigma0() -> f64 {
    1.0
}
fn default_one() -> usize {
    1
}
fn default_heat_eta_max() -> f64 {
    2e-2
}
fn default_heat_eta_min() -> f64 {
    1e-4
}
fn default_heat_t_max() -> usize {
    400
}

/// `[riemann]` — exact-profile emission.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RiemannSection {
    pub rho_left: f64,
    pub t_left: f64,
    pub rho_right: f64,
    pub t_right: f64,
    #[serde(default)]
    pub u_left: f64,
    #[serde(default)]
    pub u_right: f64,
    #[serde(default = "default_dv3")]
    pub d_v: usize,
    pub time: f64,
    #[serde(default = "default_points")]
    pub n_points: usize,
    #[serde(default = "default_domain")]
    pub domain: [f64; 2],
    #[serde(default = "default_x0")]
    pub x0: f64,
}

fn default_dv3() -> usize {
    3
}
fn default_points() -> usize {
    200
}
fn default_domain() -> [f64; 2] {
    [0.0, 1.0]
}
fn default_x0() -> f64 {
    0.5
}

/// Full experiment configuration.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunConfig {
    pub kind: ExperimentKind,
    pub seed: u64,
    #[serde(default)]
    pub out: Option<PathBuf>,
    #[serde(default)]
    pub precision: Precision,
    /// Worker threads for the per-cell collision phase; 0 = all cores.
    #[serde(default)]
    pub threads: usize,
    #[serde(default)]
    pub init: Option<InitSection>,
    #[serde(default)]
    pub space: Option<SpaceSection>,
    #[serde(default)]
    pub collision: Option<CollisionSection>,
    #[serde(default)]
    pub run: Option<RunSection>,
    #[serde(default)]
    pub field: Option<FieldShape>,
    #[serde(default)]
    pub heatlab: Option<HeatLabSection>,
    #[serde(default)]
    pub riemann: Option<RiemannSection>,
}

fn cfg_err(path: &str, msg: impl Into<String>) -> Error {
    Error::Config {
        path: path.into(),
        msg: msg.into(),
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| cfg_err("<file>", format!("cannot read {}: {e}", path.display())))?;
        let cfg: RunConfig =
            toml::from_str(&text).map_err(|e| cfg_err("<toml>", e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Validate every referenced section before any compute starts.
    pub fn validate(&self) -> Result<()> {
        match self.kind {
            ExperimentKind::Homogeneous => {
                let init = self.init.as_ref().ok_or_else(|| {
                    cfg_err("init", "homogeneous experiments need an [init] section")
                })?;
                self.require_collision()?;
                self.require_run()?;
                self.build_init_spec(init, None)?.validate()?;
            }
            ExperimentKind::Inhomogeneous => {
                let init = self.init.as_ref().ok_or_else(|| {
                    cfg_err("init", "inhomogeneous experiments need an [init] section")
                })?;
                let space = self.space.as_ref().ok_or_else(|| {
                    cfg_err("space", "inhomogeneous experiments need a [space] section")
                })?;
                if space.n_cells == 0 {
                    return Err(cfg_err("space.n_cells", "need at least one cell"));
                }
                self.require_collision()?;
                self.require_run()?;
                self.build_init_spec(init, Some(space))?.validate()?;
            }
            ExperimentKind::Heatlab => {
                let lab = self.heatlab.as_ref().ok_or_else(|| {
                    cfg_err("heatlab", "heatlab experiments need a [heatlab] section")
                })?;
                if lab.alphas.is_empty() {
                    return Err(cfg_err("heatlab.alphas", "need at least one alpha"));
                }
                if lab.alphas.iter().any(|a| !(*a > 0.0)) {
                    return Err(cfg_err("heatlab.alphas", "alphas must be positive"));
                }
                if !(lab.sigma0 > 0.0) {
                    return Err(cfg_err("heatlab.sigma0", "sigma0 must be positive"));
                }
                if lab.n_particles < 2 {
                    return Err(cfg_err("heatlab.n_particles", "need at least 2 particles"));
                }
                for m in &lab.methods {
                    if !matches!(
                        m.as_str(),
                        "esm" | "ism" | "jko" | "esm_linear" | "ism_linear" | "jko_linear"
                    ) {
                        return Err(cfg_err(
                            "heatlab.methods",
                            format!("unknown method `{m}`"),
                        ));
                    }
                }
            }
            ExperimentKind::Riemann => {
                let r = self.riemann.as_ref().ok_or_else(|| {
                    cfg_err("riemann", "riemann experiments need a [riemann] section")
                })?;
                if !(r.rho_left > 0.0 && r.rho_right > 0.0 && r.t_left > 0.0 && r.t_right > 0.0) {
                    return Err(cfg_err(
                        "riemann",
                        "densities and temperatures must be positive",
                    ));
                }
                if !(r.time > 0.0) {
                    return Err(cfg_err("riemann.time", "time must be positive"));
                }
            }
        }
        Ok(())
    }

    fn require_collision(&self) -> Result<&CollisionSection> {
        let c = self
            .collision
            .as_ref()
            .ok_or_else(|| cfg_err("collision", "missing [collision] section"))?;
        if !(c.dt > 0.0) {
            return Err(cfg_err("collision.dt", "dt must be positive"));
        }
        match c.epsilon {
            EpsilonProfile::Constant { value } if !(value > 0.0) => {
                return Err(cfg_err("collision.epsilon.value", "epsilon must be positive"));
            }
            EpsilonProfile::TanhMix { eps0 } if !(eps0 > 0.0) => {
                return Err(cfg_err("collision.epsilon.eps0", "eps0 must be positive"));
            }
            _ => {}
        }
        if !(1..=10).contains(&c.quadrature) {
            return Err(cfg_err("collision.quadrature", "quadrature order must be 1..=10"));
        }
        c.collision_config().validate()?;
        Ok(c)
    }

    fn require_run(&self) -> Result<&RunSection> {
        self.run
            .as_ref()
            .ok_or_else(|| cfg_err("run", "missing [run] section"))
    }

    /// Assemble the sampling spec from the config sections.
    pub fn build_init_spec(
        &self,
        init: &InitSection,
        space: Option<&SpaceSection>,
    ) -> Result<InitSpec> {
        Ok(InitSpec {
            d_v: init.d_v,
            n_particles: init.n_particles,
            space: space.map(|s| SpatialSpec {
                domain: s.domain,
                rho: s.rho.clone(),
            }),
            velocity: init.velocity.clone(),
        })
    }

    pub fn field_shape(&self) -> FieldShape {
        self.field.unwrap_or_default()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const HOMOGENEOUS: &str = r#"
kind = "homogeneous"
seed = 42

[init]
d_v = 2
n_particles = 256

[init.velocity]
law = "mixture"
components = [
  { weight = 0.5, mean = [1.0, 0.0], variance = 0.5 },
  { weight = 0.5, mean = [-1.0, 0.0], variance = 0.5 },
]

[collision]
operator = { kind = "landau", gamma = -3.0, r_cut = 1e-8 }
epsilon = { kind = "constant", value = 1.0 }
dt = 0.01
eta_max = 1e-2
eta_min = 1e-3
t0 = 20
t_max = 40

[run]
n_steps = 2
"#;

    #[test]
    fn parse_and_validate_homogeneous() {
        let cfg: RunConfig = toml::from_str(HOMOGENEOUS).unwrap();
        cfg.validate().unwrap();
        assert_eq!(cfg.kind, ExperimentKind::Homogeneous);
        let c = cfg.collision.as_ref().unwrap().collision_config();
        assert_eq!(c.quadrature, 5);
        assert!(matches!(c.operator, OperatorKind::Landau { .. }));
    }

    #[test]
    fn bad_epsilon_rejected_with_key_path() {
        let text = HOMOGENEOUS.replace("value = 1.0", "value = -2.0");
        let cfg: RunConfig = toml::from_str(&text).unwrap();
        let err = cfg.validate().unwrap_err();
        assert!(err.to_string().contains("collision.epsilon.value"), "{err}");
    }

    #[test]
    fn missing_section_rejected() {
        let text = HOMOGENEOUS.replace("[run]\nn_steps = 2", "");
        let cfg: RunConfig = toml::from_str(&text).unwrap();
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn heatlab_section_parses() {
        let text = r#"
kind = "heatlab"
seed = 7

[heatlab]
alphas = [0.01, 1.0, 100.0]
n_particles = 4000
methods = ["esm", "ism", "jko", "jko_linear"]
"#;
        let cfg: RunConfig = toml::from_str(text).unwrap();
        cfg.validate().unwrap();
        assert_eq!(cfg.heatlab.unwrap().alphas.len(), 3);
    }

    #[test]
    fn riemann_section_parses() {
        let text = r#"
kind = "riemann"
seed = 1

[riemann]
rho_left = 1.0
t_left = 1.0
rho_right = 0.125
t_right = 0.25
time = 0.1
"#;
        let cfg: RunConfig = toml::from_str(text).unwrap();
        cfg.validate().unwrap();
    }
}
