//! Particle representation of the distribution f: initial sampling, moment
//! computation, entropy, spatial binning, and reweighting.

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Discrete representation of f: N particles with uniform weight w = m/N and
/// per-particle log-density values logf[i] = log f(x_i, v_i).
#[derive(Debug, Clone)]
pub struct ParticleEnsemble {
    /// Spatial positions, length N when d_x = 1, empty for homogeneous runs.
    pub positions: Vec<f64>,
    /// Velocities, flat N x d_v row-major.
    pub velocities: Vec<f64>,
    /// Per-particle log-density values.
    pub logf: Vec<f64>,
    /// Uniform particle weight m/N.
    pub weight: f64,
    pub d_x: usize,
    pub d_v: usize,
}

impl ParticleEnsemble {
    pub fn len(&self) -> usize {
        self.logf.len()
    }

    pub fn is_empty(&self) -> bool {
        self.logf.is_empty()
    }

    pub fn velocity(&self, i: usize) -> &[f64] {
        &self.velocities[i * self.d_v..(i + 1) * self.d_v]
    }

    pub fn validate(&self) -> Result<()> {
        if self.logf.is_empty() {
            return Err(Error::EmptyCell);
        }
        if !(self.weight > 0.0) {
            return Err(Error::InvalidSpec(format!(
                "particle weight must be positive, got {}",
                self.weight
            )));
        }
        if self.velocities.len() != self.logf.len() * self.d_v {
            return Err(Error::InvalidSpec(
                "velocities and logf lengths disagree".into(),
            ));
        }
        if self.logf.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("logf".into()));
        }
        Ok(())
    }
}

/// Macroscopic diagnostics of a particle set.
#[derive(Debug, Clone, PartialEq)]
pub struct MacroMoments {
    /// Mass density w * N.
    pub rho: f64,
    /// Mean velocity.
    pub u: Vec<f64>,
    /// Temperature: mean of |v - u|^2 / d_v.
    pub temperature: f64,
    /// Total energy (w/2) sum |v_i|^2.
    pub energy: f64,
    /// Entropy estimate w sum logf_i.
    pub entropy: f64,
    /// Number of particles behind the estimate.
    pub count: usize,
}

/// Moments of a velocity set with uniform weight `weight` and log-densities `logf`.
pub fn moments(velocities: &[f64], d_v: usize, weight: f64, logf: &[f64]) -> Result<MacroMoments> {
    let n = logf.len();
    if n == 0 {
        return Err(Error::EmptyCell);
    }
    debug_assert_eq!(velocities.len(), n * d_v);
    let mut u = vec![0.0; d_v];
    for i in 0..n {
        for a in 0..d_v {
            u[a] += velocities[i * d_v + a];
        }
    }
    for ua in u.iter_mut() {
        *ua /= n as f64;
    }
    let mut spread = 0.0;
    let mut v2 = 0.0;
    for i in 0..n {
        for a in 0..d_v {
            let v = velocities[i * d_v + a];
            let dv = v - u[a];
            spread += dv * dv;
            v2 += v * v;
        }
    }
    let entropy = weight * logf.iter().sum::<f64>();
    Ok(MacroMoments {
        rho: weight * n as f64,
        u,
        temperature: spread / (d_v as f64 * n as f64),
        energy: 0.5 * weight * v2,
        entropy,
        count: n,
    })
}

/// Partition of the spatial domain into cells with strictly increasing boundaries.
#[derive(Debug, Clone)]
pub struct CellPartition {
    pub boundaries: Vec<f64>,
}

impl CellPartition {
    /// Uniform partition of [lo, hi] into n cells.
    pub fn uniform(lo: f64, hi: f64, n: usize) -> Result<Self> {
        if !(hi > lo) || n == 0 {
            return Err(Error::InvalidSpec(format!(
                "invalid partition: domain [{lo}, {hi}], {n} cells"
            )));
        }
        let boundaries = (0..=n)
            .map(|i| lo + (hi - lo) * i as f64 / n as f64)
            .collect();
        Ok(CellPartition { boundaries })
    }

    pub fn n_cells(&self) -> usize {
        self.boundaries.len() - 1
    }

    pub fn width(&self, l: usize) -> f64 {
        self.boundaries[l + 1] - self.boundaries[l]
    }

    pub fn center(&self, l: usize) -> f64 {
        0.5 * (self.boundaries[l] + self.boundaries[l + 1])
    }

    /// Cell index of position x. Cells are half-open [b_l, b_{l+1}) with the
    /// last cell closed at the right boundary.
    pub fn locate(&self, x: f64) -> Result<usize> {
        let lo = self.boundaries[0];
        let hi = *self.boundaries.last().unwrap();
        if x < lo || x > hi {
            return Err(Error::OutOfDomain { x, lo, hi });
        }
        if x == hi {
            return Ok(self.n_cells() - 1);
        }
        // boundaries are sorted; binary search for the half-open interval
        let idx = match self
            .boundaries
            .binary_search_by(|b| b.partial_cmp(&x).unwrap())
        {
            Ok(i) => i,             // exactly on boundary i -> right cell
            Err(i) => i - 1,        // strictly inside cell i-1
        };
        Ok(idx.min(self.n_cells() - 1))
    }
}

/// Result of assigning particles to cells: index lists plus the reweighted
/// per-cell particle weight w~ = w / |Omega_l|.
#[derive(Debug, Clone)]
pub struct Binning {
    pub cells: Vec<Vec<usize>>,
    pub wtilde: Vec<f64>,
}

/// Assign every particle to exactly one cell by position.
pub fn bin(ensemble: &ParticleEnsemble, partition: &CellPartition) -> Result<Binning> {
    let nc = partition.n_cells();
    let mut cells = vec![Vec::new(); nc];
    for (i, &x) in ensemble.positions.iter().enumerate() {
        cells[partition.locate(x)?].push(i);
    }
    let wtilde = (0..nc)
        .map(|l| ensemble.weight / partition.width(l))
        .collect();
    Ok(Binning { cells, wtilde })
}

// ---------------------------------------------------------------------------
// Initial data
// ---------------------------------------------------------------------------

/// Spatial density profile rho(x).
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "profile", rename_all = "snake_case")]
pub enum DensityProfile {
    Uniform { value: f64 },
    /// rho(x) = offset + amplitude * sin(pi x)
    Sine { offset: f64, amplitude: f64 },
    Step { left: f64, right: f64, interface: f64 },
}

impl DensityProfile {
    pub fn eval(&self, x: f64) -> f64 {
        match self {
            DensityProfile::Uniform { value } => *value,
            DensityProfile::Sine { offset, amplitude } => {
                offset + amplitude * (std::f64::consts::PI * x).sin()
            }
            DensityProfile::Step {
                left,
                right,
                interface,
            } => {
                if x <= *interface {
                    *left
                } else {
                    *right
                }
            }
        }
    }

    fn validate(&self, lo: f64, hi: f64) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidSpec(msg));
        match self {
            DensityProfile::Uniform { value } => {
                if !(*value > 0.0 && value.is_finite()) {
                    return bad(format!("uniform density must be positive, got {value}"));
                }
            }
            DensityProfile::Sine { offset, amplitude } => {
                if !(offset - amplitude.abs() > 0.0) {
                    return bad(format!(
                        "sine density not strictly positive: offset {offset}, amplitude {amplitude}"
                    ));
                }
            }
            DensityProfile::Step {
                left,
                right,
                interface,
            } => {
                if !(*left > 0.0 && *right > 0.0) {
                    return bad("step density must be positive on both sides".into());
                }
                if !(lo <= *interface && *interface <= hi) {
                    return bad("step interface outside the domain".into());
                }
            }
        }
        Ok(())
    }

    /// Mass on [lo, x].
    fn mass_up_to(&self, lo: f64, x: f64) -> f64 {
        match self {
            DensityProfile::Uniform { value } => value * (x - lo),
            DensityProfile::Sine { offset, amplitude } => {
                let pi = std::f64::consts::PI;
                offset * (x - lo) - amplitude / pi * ((pi * x).cos() - (pi * lo).cos())
            }
            DensityProfile::Step {
                left,
                right,
                interface,
            } => {
                if x <= *interface {
                    left * (x - lo)
                } else {
                    left * (interface - lo) + right * (x - interface)
                }
            }
        }
    }

    /// Invert the normalized CDF on [lo, hi] by safeguarded Newton.
    fn inverse_cdf(&self, lo: f64, hi: f64, mass: f64, u: f64) -> f64 {
        let target = u * mass;
        let (mut a, mut b) = (lo, hi);
        let mut x = lo + u * (hi - lo);
        for _ in 0..64 {
            let fx = self.mass_up_to(lo, x) - target;
            if fx > 0.0 {
                b = x;
            } else {
                a = x;
            }
            let dx = fx / self.eval(x).max(1e-300);
            let mut next = x - dx;
            if !(next > a && next < b) {
                next = 0.5 * (a + b);
            }
            if (next - x).abs() <= 1e-15 * (hi - lo).abs() {
                return next;
            }
            x = next;
        }
        x
    }
}

/// Temperature profile T(x) for local-Maxwellian initial data.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "profile", rename_all = "snake_case")]
pub enum TemperatureProfile {
    Uniform { value: f64 },
    /// T(x) = offset + amplitude * cos(pi x)
    Cosine { offset: f64, amplitude: f64 },
    Step { left: f64, right: f64, interface: f64 },
}

impl TemperatureProfile {
    pub fn eval(&self, x: f64) -> f64 {
        match self {
            TemperatureProfile::Uniform { value } => *value,
            TemperatureProfile::Cosine { offset, amplitude } => {
                offset + amplitude * (std::f64::consts::PI * x).cos()
            }
            TemperatureProfile::Step {
                left,
                right,
                interface,
            } => {
                if x <= *interface {
                    *left
                } else {
                    *right
                }
            }
        }
    }
}

/// One isotropic Gaussian component of a velocity mixture.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MixtureComponent {
    pub weight: f64,
    pub mean: Vec<f64>,
    pub variance: f64,
}

/// Analytic velocity law of the initial data; densities are known in closed
/// form so logf can be evaluated exactly at every sampled particle.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "law", rename_all = "snake_case")]
pub enum VelocityLaw {
    /// Normalized Gaussian mixture, the same at every x.
    Mixture { components: Vec<MixtureComponent> },
    /// Maxwellian with constant bulk velocity and x-dependent temperature.
    LocalMaxwellian {
        u: Vec<f64>,
        temperature: TemperatureProfile,
    },
    /// Two half-space Maxwellians split on the sign of v_x (homogeneous 3V).
    HalfSpaceMaxwellians {
        rho_left: f64,
        t_left: f64,
        rho_right: f64,
        t_right: f64,
    },
}

fn gaussian_logpdf(v: &[f64], mean: &[f64], variance: f64) -> f64 {
    let d = v.len() as f64;
    let mut q = 0.0;
    for (a, b) in v.iter().zip(mean) {
        q += (a - b) * (a - b);
    }
    -0.5 * d * (2.0 * std::f64::consts::PI * variance).ln() - q / (2.0 * variance)
}

impl VelocityLaw {
    fn validate(&self, d_v: usize) -> Result<()> {
        match self {
            VelocityLaw::Mixture { components } => {
                if components.is_empty() {
                    return Err(Error::InvalidSpec("mixture has no components".into()));
                }
                let total: f64 = components.iter().map(|c| c.weight).sum();
                if (total - 1.0).abs() > 1e-12 {
                    return Err(Error::InvalidSpec(format!(
                        "mixture weights sum to {total}, expected 1"
                    )));
                }
                for c in components {
                    if c.mean.len() != d_v {
                        return Err(Error::InvalidSpec(
                            "mixture component mean has wrong dimension".into(),
                        ));
                    }
                    if !(c.variance > 0.0 && c.weight >= 0.0) {
                        return Err(Error::InvalidSpec(
                            "mixture component needs variance > 0 and weight >= 0".into(),
                        ));
                    }
                }
            }
            VelocityLaw::LocalMaxwellian { u, .. } => {
                if u.len() != d_v {
                    return Err(Error::InvalidSpec(
                        "bulk velocity has wrong dimension".into(),
                    ));
                }
            }
            VelocityLaw::HalfSpaceMaxwellians {
                rho_left,
                t_left,
                rho_right,
                t_right,
            } => {
                if d_v != 3 {
                    return Err(Error::InvalidSpec(
                        "half-space Maxwellian law is defined for d_v = 3".into(),
                    ));
                }
                if !(*rho_left > 0.0 && *rho_right > 0.0 && *t_left > 0.0 && *t_right > 0.0) {
                    return Err(Error::InvalidSpec(
                        "half-space Maxwellians need positive densities and temperatures".into(),
                    ));
                }
            }
        }
        Ok(())
    }

    /// Velocity-space mass per unit rho(x) (homogeneous laws fold rho in).
    fn mass(&self) -> f64 {
        match self {
            VelocityLaw::Mixture { .. } | VelocityLaw::LocalMaxwellian { .. } => 1.0,
            VelocityLaw::HalfSpaceMaxwellians {
                rho_left,
                rho_right,
                ..
            } => 0.5 * (rho_left + rho_right),
        }
    }

    fn sample(&self, x: f64, d_v: usize, rng: &mut ChaCha8Rng, out: &mut [f64]) {
        match self {
            VelocityLaw::Mixture { components } => {
                let pick: f64 = rng.random();
                let mut acc = 0.0;
                let mut chosen = &components[components.len() - 1];
                for c in components {
                    acc += c.weight;
                    if pick < acc {
                        chosen = c;
                        break;
                    }
                }
                let sd = chosen.variance.sqrt();
                for a in 0..d_v {
                    let n: f64 = rng.sample(StandardNormal);
                    out[a] = chosen.mean[a] + sd * n;
                }
            }
            VelocityLaw::LocalMaxwellian { u, temperature } => {
                let sd = temperature.eval(x).sqrt();
                for a in 0..d_v {
                    let n: f64 = rng.sample(StandardNormal);
                    out[a] = u[a] + sd * n;
                }
            }
            VelocityLaw::HalfSpaceMaxwellians {
                rho_left,
                t_left,
                rho_right,
                t_right,
            } => {
                let p_left = 0.5 * rho_left / (0.5 * (rho_left + rho_right));
                let pick: f64 = rng.random();
                let (t, sign) = if pick < p_left {
                    (*t_left, -1.0)
                } else {
                    (*t_right, 1.0)
                };
                let sd = t.sqrt();
                let n: f64 = rng.sample(StandardNormal);
                out[0] = sign * sd * n.abs();
                for a in 1..d_v {
                    let n: f64 = rng.sample(StandardNormal);
                    out[a] = sd * n;
                }
            }
        }
    }

    /// log of the velocity-space density (per unit rho(x) where applicable).
    pub fn log_density(&self, x: f64, v: &[f64]) -> f64 {
        match self {
            VelocityLaw::Mixture { components } => {
                let mut acc = 0.0;
                for c in components {
                    acc += c.weight * gaussian_logpdf(v, &c.mean, c.variance).exp();
                }
                acc.ln()
            }
            VelocityLaw::LocalMaxwellian { u, temperature } => {
                gaussian_logpdf(v, u, temperature.eval(x))
            }
            VelocityLaw::HalfSpaceMaxwellians {
                rho_left,
                t_left,
                rho_right,
                t_right,
            } => {
                let zero = vec![0.0; v.len()];
                if v[0] <= 0.0 {
                    rho_left.ln() + gaussian_logpdf(v, &zero, *t_left)
                } else {
                    rho_right.ln() + gaussian_logpdf(v, &zero, *t_right)
                }
            }
        }
    }
}

/// Spatial part of the initial condition.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SpatialSpec {
    pub domain: [f64; 2],
    pub rho: DensityProfile,
}

/// Full initial-condition specification.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InitSpec {
    pub d_v: usize,
    pub n_particles: usize,
    #[serde(default)]
    pub space: Option<SpatialSpec>,
    pub velocity: VelocityLaw,
}

impl InitSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_particles == 0 {
            return Err(Error::InvalidSpec("n_particles must be >= 1".into()));
        }
        if !(1..=3).contains(&self.d_v) {
            return Err(Error::InvalidSpec(format!(
                "d_v must be 1, 2 or 3, got {}",
                self.d_v
            )));
        }
        if let Some(space) = &self.space {
            let [lo, hi] = space.domain;
            if !(hi > lo) {
                return Err(Error::InvalidSpec(format!("empty domain [{lo}, {hi}]")));
            }
            space.rho.validate(lo, hi)?;
            let mass = space.rho.mass_up_to(lo, hi);
            if !(mass > 0.0 && mass.is_finite()) {
                return Err(Error::InvalidSpec(format!(
                    "spatial density is not normalizable: total mass {mass}"
                )));
            }
        }
        self.velocity.validate(self.d_v)
    }

    /// Total mass of f0.
    pub fn total_mass(&self) -> f64 {
        let spatial = match &self.space {
            Some(space) => space.rho.mass_up_to(space.domain[0], space.domain[1]),
            None => 1.0,
        };
        spatial * self.velocity.mass()
    }
}

/// Stratified, analytically weighted sampling of the initial data.
///
/// Positions take one jittered point per equal-mass stratum of rho (CDF
/// inversion); velocities are drawn exactly from the analytic law; logf is
/// the analytic log f0 at each particle. Deterministic per (spec, seed).
pub fn sample_initial(spec: &InitSpec, seed: u64) -> Result<ParticleEnsemble> {
    spec.validate()?;
    let n = spec.n_particles;
    let d_v = spec.d_v;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let (positions, d_x) = match &spec.space {
        Some(space) => {
            let [lo, hi] = space.domain;
            let mass = space.rho.mass_up_to(lo, hi);
            let mut xs = Vec::with_capacity(n);
            for i in 0..n {
                let jitter: f64 = rng.random();
                let u = (i as f64 + jitter) / n as f64;
                xs.push(space.rho.inverse_cdf(lo, hi, mass, u));
            }
            (xs, 1)
        }
        None => (Vec::new(), 0),
    };

    let mut velocities = vec![0.0; n * d_v];
    let mut logf = vec![0.0; n];
    for i in 0..n {
        let x = if d_x == 1 { positions[i] } else { 0.0 };
        let v = &mut velocities[i * d_v..(i + 1) * d_v];
        spec.velocity.sample(x, d_v, &mut rng, v);
        let mut lf = spec.velocity.log_density(x, v);
        if let Some(space) = &spec.space {
            lf += space.rho.eval(x).ln();
        }
        logf[i] = lf;
    }

    let ensemble = ParticleEnsemble {
        positions,
        velocities,
        logf,
        weight: spec.total_mass() / n as f64,
        d_x,
        d_v,
    };
    ensemble.validate()?;
    Ok(ensemble)
}

/// The bi-Maxwellian initial data of the homogeneous relaxation test:
/// f0(v) = (1/2pi) (exp(-|vx-1|^2) + exp(-|vx+1|^2)) exp(-vy^2).
pub fn bi_maxwellian_spec(n_particles: usize) -> InitSpec {
    InitSpec {
        d_v: 2,
        n_particles,
        space: None,
        velocity: VelocityLaw::Mixture {
            components: vec![
                MixtureComponent {
                    weight: 0.5,
                    mean: vec![1.0, 0.0],
                    variance: 0.5,
                },
                MixtureComponent {
                    weight: 0.5,
                    mean: vec![-1.0, 0.0],
                    variance: 0.5,
                },
            ],
        },
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn moments_two_particles() {
        let m = moments(&[1.0, 0.0, -1.0, 0.0], 2, 1.0, &[0.0, 0.0]).unwrap();
        assert_relative_eq!(m.u[0], 0.0);
        assert_relative_eq!(m.u[1], 0.0);
        assert_relative_eq!(m.temperature, 0.5);
        assert_relative_eq!(m.rho, 2.0);
    }

    #[test]
    fn moments_single_particle() {
        let m = moments(&[0.7, -0.3], 2, 2.0, &[1.0]).unwrap();
        assert_eq!(m.temperature, 0.0);
        assert_eq!(m.u, vec![0.7, -0.3]);
    }

    #[test]
    fn moments_empty_errors() {
        assert!(moments(&[], 2, 1.0, &[]).is_err());
    }

    #[test]
    fn bi_maxwellian_moments() {
        // Mixture x-variance 1/2 + 1 (mean spread) = 3/2, y-variance 1/2 => T = 1.
        let spec = bi_maxwellian_spec(12800);
        let e = sample_initial(&spec, 1234).unwrap();
        let m = moments(&e.velocities, 2, e.weight, &e.logf).unwrap();
        assert!(m.u[0].abs() < 0.05, "u_x = {}", m.u[0]);
        assert!(m.u[1].abs() < 0.05, "u_y = {}", m.u[1]);
        assert!((m.temperature - 1.0).abs() < 0.05, "T = {}", m.temperature);
        assert_relative_eq!(m.rho, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn single_maxwellian_moments() {
        let spec = InitSpec {
            d_v: 2,
            n_particles: 8000,
            space: None,
            velocity: VelocityLaw::Mixture {
                components: vec![MixtureComponent {
                    weight: 1.0,
                    mean: vec![0.0, 0.0],
                    variance: 1.0,
                }],
            },
        };
        let e = sample_initial(&spec, 99).unwrap();
        let m = moments(&e.velocities, 2, e.weight, &e.logf).unwrap();
        assert!((m.rho - 1.0).abs() < 1e-12);
        assert!(m.u[0].abs() < 0.05 && m.u[1].abs() < 0.05);
        assert!((m.temperature - 1.0).abs() < 0.05);
    }

    #[test]
    fn single_particle_weight_is_mass() {
        let mut spec = bi_maxwellian_spec(1);
        spec.n_particles = 1;
        let e = sample_initial(&spec, 5).unwrap();
        assert_relative_eq!(e.weight, 1.0);
    }

    #[test]
    fn sampling_is_deterministic() {
        let spec = bi_maxwellian_spec(512);
        let a = sample_initial(&spec, 42).unwrap();
        let b = sample_initial(&spec, 42).unwrap();
        assert_eq!(a.velocities, b.velocities);
        assert_eq!(a.logf, b.logf);
        let c = sample_initial(&spec, 43).unwrap();
        assert_ne!(a.velocities, c.velocities);
    }

    #[test]
    fn mixture_weights_must_sum_to_one() {
        let mut spec = bi_maxwellian_spec(16);
        if let VelocityLaw::Mixture { components } = &mut spec.velocity {
            components[0].weight = 0.7;
        }
        assert!(sample_initial(&spec, 0).is_err());
    }

    #[test]
    fn nonpositive_density_rejected() {
        let spec = InitSpec {
            d_v: 2,
            n_particles: 16,
            space: Some(SpatialSpec {
                domain: [-1.0, 1.0],
                rho: DensityProfile::Sine {
                    offset: 0.5,
                    amplitude: 1.0,
                },
            }),
            velocity: bi_maxwellian_spec(1).velocity,
        };
        assert!(sample_initial(&spec, 0).is_err());
    }

    #[test]
    fn binning_two_cells() {
        let e = ParticleEnsemble {
            positions: vec![0.1, 0.9],
            velocities: vec![0.0, 0.0, 0.0, 0.0],
            logf: vec![0.0, 0.0],
            weight: 0.5,
            d_x: 1,
            d_v: 2,
        };
        let p = CellPartition::uniform(0.0, 1.0, 2).unwrap();
        let b = bin(&e, &p).unwrap();
        assert_eq!(b.cells[0], vec![0]);
        assert_eq!(b.cells[1], vec![1]);
        assert_relative_eq!(b.wtilde[0], 2.0 * e.weight);
        assert_relative_eq!(b.wtilde[1], 2.0 * e.weight);
    }

    #[test]
    fn boundary_particle_goes_right() {
        let p = CellPartition::uniform(0.0, 1.0, 2).unwrap();
        assert_eq!(p.locate(0.5).unwrap(), 1);
        assert_eq!(p.locate(0.0).unwrap(), 0);
        // domain right end belongs to the last cell
        assert_eq!(p.locate(1.0).unwrap(), 1);
        assert!(p.locate(1.5).is_err());
    }

    #[test]
    fn reweighting_hundred_cells() {
        let p = CellPartition::uniform(-1.0, 1.0, 100).unwrap();
        let e = ParticleEnsemble {
            positions: vec![0.0],
            velocities: vec![0.0, 0.0],
            logf: vec![0.0],
            weight: 0.25,
            d_x: 1,
            d_v: 2,
        };
        let b = bin(&e, &p).unwrap();
        for l in 0..100 {
            assert_relative_eq!(b.wtilde[l], e.weight / 0.02, max_relative = 1e-12);
        }
    }

    #[test]
    fn binning_preserves_mass() {
        let spec = InitSpec {
            d_v: 2,
            n_particles: 5000,
            space: Some(SpatialSpec {
                domain: [-1.0, 1.0],
                rho: DensityProfile::Sine {
                    offset: 2.0 / 3.0,
                    amplitude: 1.0 / 3.0,
                },
            }),
            velocity: bi_maxwellian_spec(1).velocity,
        };
        let e = sample_initial(&spec, 7).unwrap();
        let p = CellPartition::uniform(-1.0, 1.0, 37).unwrap();
        let b = bin(&e, &p).unwrap();
        let binned_mass: f64 = (0..p.n_cells())
            .map(|l| b.wtilde[l] * p.width(l) * b.cells[l].len() as f64)
            .sum();
        let total = e.weight * e.len() as f64;
        assert_relative_eq!(binned_mass, total, max_relative = 1e-12);
        let assigned: usize = b.cells.iter().map(|c| c.len()).sum();
        assert_eq!(assigned, e.len());
    }

    #[test]
    fn moments_of_disjoint_union_combine() {
        let v1 = vec![1.0, 0.5, -0.25, 0.75];
        let l1 = vec![-0.3, 0.2];
        let v2 = vec![0.1, -0.9, 2.0, 0.0, -1.0, 1.0];
        let l2 = vec![0.5, -0.1, 0.9];
        let w = 0.2;
        let m1 = moments(&v1, 2, w, &l1).unwrap();
        let m2 = moments(&v2, 2, w, &l2).unwrap();
        let vu: Vec<f64> = v1.iter().chain(&v2).copied().collect();
        let lu: Vec<f64> = l1.iter().chain(&l2).copied().collect();
        let mu = moments(&vu, 2, w, &lu).unwrap();
        assert_relative_eq!(mu.rho, m1.rho + m2.rho, max_relative = 1e-12);
        for a in 0..2 {
            let expect = (m1.rho * m1.u[a] + m2.rho * m2.u[a]) / (m1.rho + m2.rho);
            assert_relative_eq!(mu.u[a], expect, max_relative = 1e-12);
        }
        assert_relative_eq!(mu.energy, m1.energy + m2.energy, max_relative = 1e-12);
        assert_relative_eq!(mu.entropy, m1.entropy + m2.entropy, max_relative = 1e-12);
    }

    #[test]
    fn half_space_law_masses() {
        let spec = InitSpec {
            d_v: 3,
            n_particles: 20000,
            space: None,
            velocity: VelocityLaw::HalfSpaceMaxwellians {
                rho_left: 16.0 / 9.0,
                t_left: 1.0,
                rho_right: 2.0 / 9.0,
                t_right: 0.25,
            },
        };
        assert_relative_eq!(spec.total_mass(), 1.0, epsilon = 1e-12);
        let e = sample_initial(&spec, 3).unwrap();
        // every v_x <= 0 particle follows the left law
        let frac_left = (0..e.len())
            .filter(|&i| e.velocity(i)[0] <= 0.0)
            .count() as f64
            / e.len() as f64;
        assert!((frac_left - 8.0 / 9.0).abs() < 0.02, "{frac_left}");
    }
}
