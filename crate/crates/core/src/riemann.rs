//! Exact Riemann solver for the 1D compressible Euler system, the
//! fluid-limit reference for the Sod shock-tube test. Star-region pressure
//! from the standard two-wave pressure function solved by Newton iteration,
//! then self-similar sampling of rarefaction/shock branches.

use crate::error::{Error, Result};
use crate::splitting::CellProfile;

/// Primitive Euler state (rho, u, p) with p = rho T.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EulerState {
    pub rho: f64,
    pub u: f64,
    pub p: f64,
}

impl EulerState {
    pub fn sound_speed(&self, gamma: f64) -> f64 {
        (gamma * self.p / self.rho).sqrt()
    }

    pub fn temperature(&self) -> f64 {
        self.p / self.rho
    }
}

/// Gas exponent forced by the kinetic energy relation
/// E = rho |u|^2 / 2 + (d_v/2) rho T: gamma = (d_v + 2) / d_v.
pub fn gas_gamma(d_v: usize) -> f64 {
    (d_v as f64 + 2.0) / d_v as f64
}

/// Pressure function of one side and its derivative.
fn pressure_fn(p: f64, s: &EulerState, gamma: f64) -> (f64, f64) {
    let a = s.sound_speed(gamma);
    if p > s.p {
        // shock branch
        let ak = 2.0 / ((gamma + 1.0) * s.rho);
        let bk = (gamma - 1.0) / (gamma + 1.0) * s.p;
        let root = (ak / (p + bk)).sqrt();
        let f = (p - s.p) * root;
        let df = root * (1.0 - 0.5 * (p - s.p) / (p + bk));
        (f, df)
    } else {
        // rarefaction branch
        let exponent = (gamma - 1.0) / (2.0 * gamma);
        let f = 2.0 * a / (gamma - 1.0) * ((p / s.p).powf(exponent) - 1.0);
        let df = (p / s.p).powf(-(gamma + 1.0) / (2.0 * gamma)) / (s.rho * a);
        (f, df)
    }
}

/// Self-similar solution of the Riemann problem, sampled at xi = x / t.
#[derive(Debug, Clone)]
pub struct RiemannSolution {
    pub left: EulerState,
    pub right: EulerState,
    pub gamma: f64,
    pub p_star: f64,
    pub u_star: f64,
    pub newton_iters: usize,
}

/// Solve for the star state (Newton to 1e-12 from the two-rarefaction guess)
/// and return a sampler. Errors when the data would generate vacuum.
pub fn exact_riemann(left: EulerState, right: EulerState, gamma: f64) -> Result<RiemannSolution> {
    for (name, s) in [("left", &left), ("right", &right)] {
        if !(s.rho > 0.0 && s.p > 0.0) {
            return Err(Error::Domain(format!(
                "{name} state needs positive density and pressure: {s:?}"
            )));
        }
    }
    let al = left.sound_speed(gamma);
    let ar = right.sound_speed(gamma);
    let du = right.u - left.u;
    // pressure-function solvability (no vacuum generation)
    if 2.0 * (al + ar) / (gamma - 1.0) <= du {
        return Err(Error::Domain(
            "vacuum-generating data: pressure function has no positive root".into(),
        ));
    }
    // two-rarefaction initial guess
    let z = (gamma - 1.0) / (2.0 * gamma);
    let guess = ((al + ar - 0.5 * (gamma - 1.0) * du)
        / (al / left.p.powf(z) + ar / right.p.powf(z)))
    .powf(1.0 / z);
    let mut p = guess.max(1e-14);
    let mut iters = 0;
    loop {
        let (fl, dfl) = pressure_fn(p, &left, gamma);
        let (fr, dfr) = pressure_fn(p, &right, gamma);
        let f = fl + fr + du;
        let df = dfl + dfr;
        let dp = f / df;
        let p_new = (p - dp).max(1e-14 * p);
        let change = 2.0 * (p_new - p).abs() / (p_new + p);
        p = p_new;
        iters += 1;
        if change < 1e-12 || iters >= 200 {
            break;
        }
    }
    let (fl, _) = pressure_fn(p, &left, gamma);
    let (fr, _) = pressure_fn(p, &right, gamma);
    let u_star = 0.5 * (left.u + right.u) + 0.5 * (fr - fl);
    Ok(RiemannSolution {
        left,
        right,
        gamma,
        p_star: p,
        u_star,
        newton_iters: iters,
    })
}

impl RiemannSolution {
    /// Sample the self-similar solution at xi = x / t.
    pub fn sample(&self, xi: f64) -> EulerState {
        let g = self.gamma;
        let gm1 = g - 1.0;
        let gp1 = g + 1.0;
        if xi <= self.u_star {
            let s = &self.left;
            let a = s.sound_speed(g);
            if self.p_star > s.p {
                // left shock
                let ratio = self.p_star / s.p;
                let speed = s.u - a * (gp1 / (2.0 * g) * ratio + gm1 / (2.0 * g)).sqrt();
                if xi <= speed {
                    *s
                } else {
                    let rho = s.rho * ((ratio + gm1 / gp1) / (gm1 / gp1 * ratio + 1.0));
                    EulerState {
                        rho,
                        u: self.u_star,
                        p: self.p_star,
                    }
                }
            } else {
                // left rarefaction
                let head = s.u - a;
                let a_star = a * (self.p_star / s.p).powf(gm1 / (2.0 * g));
                let tail = self.u_star - a_star;
                if xi <= head {
                    *s
                } else if xi >= tail {
                    EulerState {
                        rho: s.rho * (self.p_star / s.p).powf(1.0 / g),
                        u: self.u_star,
                        p: self.p_star,
                    }
                } else {
                    let factor = 2.0 / gp1 + gm1 / (gp1 * a) * (s.u - xi);
                    EulerState {
                        rho: s.rho * factor.powf(2.0 / gm1),
                        u: 2.0 / gp1 * (a + gm1 / 2.0 * s.u + xi),
                        p: s.p * factor.powf(2.0 * g / gm1),
                    }
                }
            }
        } else {
            let s = &self.right;
            let a = s.sound_speed(g);
            if self.p_star > s.p {
                // right shock
                let ratio = self.p_star / s.p;
                let speed = s.u + a * (gp1 / (2.0 * g) * ratio + gm1 / (2.0 * g)).sqrt();
                if xi >= speed {
                    *s
                } else {
                    let rho = s.rho * ((ratio + gm1 / gp1) / (gm1 / gp1 * ratio + 1.0));
                    EulerState {
                        rho,
                        u: self.u_star,
                        p: self.p_star,
                    }
                }
            } else {
                // right rarefaction
                let head = s.u + a;
                let a_star = a * (self.p_star / s.p).powf(gm1 / (2.0 * g));
                let tail = self.u_star + a_star;
                if xi >= head {
                    *s
                } else if xi <= tail {
                    EulerState {
                        rho: s.rho * (self.p_star / s.p).powf(1.0 / g),
                        u: self.u_star,
                        p: self.p_star,
                    }
                } else {
                    let factor = 2.0 / gp1 - gm1 / (gp1 * a) * (s.u - xi);
                    EulerState {
                        rho: s.rho * factor.powf(2.0 / gm1),
                        u: 2.0 / gp1 * (-a + gm1 / 2.0 * s.u + xi),
                        p: s.p * factor.powf(2.0 * g / gm1),
                    }
                }
            }
        }
    }
}

/// L1 errors of (rho, u, T) between the per-cell snapshot profiles and the
/// exact self-similar solution at time t, with the membrane at `x0`.
pub fn profile_error(
    profiles: &[CellProfile],
    t: f64,
    x0: f64,
    left: EulerState,
    right: EulerState,
    gamma: f64,
) -> Result<(f64, f64, f64)> {
    if t <= 0.0 {
        return Err(Error::Domain("profile_error needs t > 0".into()));
    }
    let solution = exact_riemann(left, right, gamma)?;
    let mut e_rho = 0.0;
    let mut e_u = 0.0;
    let mut e_t = 0.0;
    for p in profiles {
        let exact = solution.sample((p.center - x0) / t);
        e_rho += (p.rho - exact.rho).abs();
        e_u += (p.u[0] - exact.u).abs();
        e_t += (p.temperature - exact.temperature()).abs();
    }
    let n = profiles.len() as f64;
    Ok((e_rho / n, e_u / n, e_t / n))
}
