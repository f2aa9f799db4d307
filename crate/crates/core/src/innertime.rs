//! Inner-time (tau in [0,1]) machinery: Gauss-Legendre quadrature, explicit
//! RK4 and implicit-midpoint advancement of particle trajectories, Broyden +
//! Armijo nonlinear solving, and quadrature accumulation of log-determinant
//! increments. The log-determinant is obtained by quadrature over the nodes
//! produced by the ODE solver, never by an auxiliary ODE state.

use crate::error::{Error, Result};
use crate::field::{self, FieldEval};
use crate::kernels::KernelParams;

/// Gauss-Legendre nodes and weights mapped to [0, 1].
#[derive(Debug, Clone)]
pub struct QuadratureRule {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

/// Standard Gauss-Legendre rule with `k` interior nodes, mapped from [-1, 1]
/// to [0, 1]. Supported orders: 1..=10.
pub fn gauss_legendre(k: usize) -> Result<QuadratureRule> {
    if !(1..=10).contains(&k) {
        return Err(Error::InvalidSpec(format!(
            "gauss_legendre supports 1..=10 nodes, got {k}"
        )));
    }
    // Newton iteration on P_k with the three-term recurrence.
    let mut nodes = vec![0.0; k];
    let mut weights = vec![0.0; k];
    let n = k as f64;
    for i in 0..k {
        let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n + 0.5)).cos();
        for _ in 0..100 {
            let (p, dp) = legendre(k, x);
            let dx = p / dp;
            x -= dx;
            if dx.abs() < 1e-15 {
                break;
            }
        }
        let (_, dp) = legendre(k, x);
        // nodes come out in descending order of x
        nodes[k - 1 - i] = 0.5 * (x + 1.0);
        weights[k - 1 - i] = 1.0 / ((1.0 - x * x) * dp * dp);
    }
    Ok(QuadratureRule { nodes, weights })
}

/// P_k(x) and P_k'(x).
fn legendre(k: usize, x: f64) -> (f64, f64) {
    let mut p0 = 1.0;
    let mut p1 = x;
    for j in 2..=k {
        let jf = j as f64;
        let p2 = ((2.0 * jf - 1.0) * x * p1 - (jf - 1.0) * p0) / jf;
        p0 = p1;
        p1 = p2;
    }
    if k == 0 {
        return (1.0, 0.0);
    }
    if k == 1 {
        return (x, 1.0);
    }
    let dp = k as f64 * (x * p1 - p0) / (x * x - 1.0);
    (p1, dp)
}

/// One classical RK4 step of `rhs` from tau_a to tau_b.
pub fn rk4_advance<F: FnMut(f64, &[f64], &mut [f64])>(
    z: &[f64],
    mut rhs: F,
    tau_a: f64,
    tau_b: f64,
) -> Vec<f64> {
    let h = tau_b - tau_a;
    let n = z.len();
    let mut k1 = vec![0.0; n];
    let mut k2 = vec![0.0; n];
    let mut k3 = vec![0.0; n];
    let mut k4 = vec![0.0; n];
    let mut u = vec![0.0; n];
    rhs(tau_a, z, &mut k1);
    for i in 0..n {
        u[i] = z[i] + 0.5 * h * k1[i];
    }
    rhs(tau_a + 0.5 * h, &u, &mut k2);
    for i in 0..n {
        u[i] = z[i] + 0.5 * h * k2[i];
    }
    rhs(tau_a + 0.5 * h, &u, &mut k3);
    for i in 0..n {
        u[i] = z[i] + h * k3[i];
    }
    rhs(tau_b, &u, &mut k4);
    let mut out = vec![0.0; n];
    for i in 0..n {
        out[i] = z[i] + h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
    }
    out
}

/// Broyden + Armijo controls for the implicit midpoint solve.
#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct BroydenConfig {
    pub tol: f64,
    pub max_iters: usize,
    /// Backtracking ratio in (0, 1).
    pub beta: f64,
    /// Armijo constant in (0, 1).
    pub c: f64,
}

impl Default for BroydenConfig {
    fn default() -> Self {
        BroydenConfig {
            tol: 1e-6,
            max_iters: 50,
            beta: 0.5,
            c: 1e-4,
        }
    }
}

/// Approximate inverse Jacobian as I plus an ordered list of rank-one
/// updates; reproduces the dense good-Broyden operator without storing it.
struct InverseJacobian {
    updates: Vec<(Vec<f64>, Vec<f64>)>,
}

impl InverseJacobian {
    fn identity() -> Self {
        InverseJacobian {
            updates: Vec::new(),
        }
    }

    fn apply(&self, x: &[f64], out: &mut [f64]) {
        out.copy_from_slice(x);
        for (u, v) in &self.updates {
            let dot: f64 = v.iter().zip(x).map(|(a, b)| a * b).sum();
            for (o, ui) in out.iter_mut().zip(u) {
                *o += dot * ui;
            }
        }
    }

    fn apply_transpose(&self, x: &[f64], out: &mut [f64]) {
        out.copy_from_slice(x);
        for (u, v) in &self.updates {
            let dot: f64 = u.iter().zip(x).map(|(a, b)| a * b).sum();
            for (o, vi) in out.iter_mut().zip(v) {
                *o += dot * vi;
            }
        }
    }

    fn push(&mut self, u: Vec<f64>, v: Vec<f64>) {
        self.updates.push((u, v));
    }
}

/// Solve the implicit midpoint update z = z_k + dtau * rhs(tau_mid, (z_k+z)/2)
/// to the Broyden tolerance. Returns the converged state and the number of
/// quasi-Newton iterations. The initial iterate is an RK4 predictor.
pub fn implicit_midpoint_step<F: FnMut(f64, &[f64], &mut [f64])>(
    z_k: &[f64],
    mut rhs: F,
    tau_a: f64,
    dtau: f64,
    cfg: &BroydenConfig,
) -> Result<(Vec<f64>, usize)> {
    let n = z_k.len();
    let tau_mid = tau_a + 0.5 * dtau;
    let mut mid = vec![0.0; n];
    let mut fval = vec![0.0; n];
    let residual = |z: &[f64], rhs: &mut F, mid: &mut [f64], fval: &mut [f64], r: &mut [f64]| {
        for i in 0..n {
            mid[i] = 0.5 * (z_k[i] + z[i]);
        }
        rhs(tau_mid, mid, fval);
        for i in 0..n {
            r[i] = z_k[i] + dtau * fval[i] - z[i];
        }
    };

    let mut z = rk4_advance(z_k, &mut rhs, tau_a, tau_a + dtau);
    let mut r = vec![0.0; n];
    residual(&z, &mut rhs, &mut mid, &mut fval, &mut r);
    let mut phi: f64 = r.iter().map(|a| a * a).sum();
    if phi.sqrt() <= cfg.tol {
        return Ok((z, 0));
    }

    let mut jinv = InverseJacobian::identity();
    let mut dir = vec![0.0; n];
    let mut z_new = vec![0.0; n];
    let mut r_new = vec![0.0; n];
    for iter in 1..=cfg.max_iters {
        jinv.apply(&r, &mut dir);
        // Armijo backtracking on Phi(z) = |G(z) - z|^2
        let mut eta = 1.0;
        let mut phi_new;
        loop {
            for i in 0..n {
                z_new[i] = z[i] - eta * dir[i];
            }
            residual(&z_new, &mut rhs, &mut mid, &mut fval, &mut r_new);
            phi_new = r_new.iter().map(|a| a * a).sum::<f64>();
            if phi_new <= (1.0 - 2.0 * cfg.c * eta) * phi || eta < 1e-6 {
                break;
            }
            eta *= cfg.beta;
        }
        // rank-one inverse update from the accepted step
        let dz: Vec<f64> = (0..n).map(|i| z_new[i] - z[i]).collect();
        let dr: Vec<f64> = (0..n).map(|i| r_new[i] - r[i]).collect();
        let mut jdr = vec![0.0; n];
        jinv.apply(&dr, &mut jdr);
        let denom: f64 = dz.iter().zip(&jdr).map(|(a, b)| a * b).sum();
        if denom.abs() > 1e-300 {
            let u: Vec<f64> = (0..n).map(|i| (dz[i] - jdr[i]) / denom).collect();
            let mut v = vec![0.0; n];
            jinv.apply_transpose(&dz, &mut v);
            jinv.push(u, v);
        }
        z.copy_from_slice(&z_new);
        r.copy_from_slice(&r_new);
        phi = phi_new;
        if phi.sqrt() <= cfg.tol {
            return Ok((z, iter));
        }
    }
    Err(Error::Convergence {
        residual: phi.sqrt(),
        iters: cfg.max_iters,
    })
}

// ---------------------------------------------------------------------------
// Trajectory integration
// ---------------------------------------------------------------------------

/// Which constraint dynamics the trajectory follows.
#[derive(Debug, Clone, Copy)]
pub enum DynKind {
    /// Pairwise Landau drift with the given kernel.
    Landau(KernelParams),
    /// Projected Dougherty drift (momentum/energy tangent space).
    DoughertyProjected,
    /// The raw field itself (Dougherty WGF, heat-equation lab).
    Direct,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolverKind {
    Rk4,
    ImplicitMidpoint,
}

/// Controls for one inner-time integration.
#[derive(Debug, Clone, Copy)]
pub struct InnerConfig {
    pub kind: DynKind,
    pub solver: SolverKind,
    pub quadrature: usize,
    pub broyden: BroydenConfig,
}

/// Per-node projection data recorded for Dougherty trajectories.
#[derive(Debug, Clone)]
pub struct NodeProjection {
    pub mean_shift: Vec<f64>,
    pub energy_coeff: f64,
    pub u_mean: Vec<f64>,
}

/// Particle states and quadrature accumulators over the augmented node grid
/// tau_0 = 0 < tau_1 < ... < tau_K < tau_{K+1} = 1 of one collision step.
#[derive(Debug, Clone)]
pub struct InnerTrajectory {
    /// States z^k at all K+2 augmented nodes (flat n x d each).
    pub nodes: Vec<Vec<f64>>,
    /// Raw field values at the K interior nodes.
    pub node_speed: Vec<Vec<f64>>,
    /// Field divergences at the K interior nodes.
    pub node_div: Vec<Vec<f64>>,
    /// Energy-projection data at interior nodes (Dougherty only).
    pub projections: Vec<NodeProjection>,
    /// Accumulated log-determinant increment per particle.
    pub ell: Vec<f64>,
    /// Accumulated kinetic-cost quadrature sum (operator-specific integrand,
    /// without the epsilon / weight prefactors).
    pub cost: f64,
    /// Total quasi-Newton iterations spent in implicit solves.
    pub solver_iters: usize,
    pub quadrature: QuadratureRule,
}

impl InnerTrajectory {
    /// Terminal state z(1).
    pub fn terminal(&self) -> &[f64] {
        self.nodes.last().unwrap()
    }
}

/// Recorded integrator internals for the training-time reverse sweep.
#[derive(Debug, Clone, Default)]
pub struct Tape {
    /// RK4 stage input states per subinterval (4 each).
    pub rk4_stages: Vec<[Vec<f64>; 4]>,
    /// Midpoint states per subinterval for the implicit solver (JFB form).
    pub midpoints: Vec<Vec<f64>>,
}

/// Evaluate the drift of the given dynamics at (tau, z).
pub fn drift<F: FieldEval>(
    kind: &DynKind,
    field: &F,
    wtilde: f64,
    tau: f64,
    z: &[f64],
    speed: &mut [f64],
    out: &mut [f64],
) {
    field.eval_batch(tau, z, speed);
    match kind {
        DynKind::Landau(kp) => {
            field::landau_drift(z, speed, wtilde, kp, out);
        }
        DynKind::DoughertyProjected => {
            let proj = field::dougherty_project_lenient(speed, z, field.d_v())
                .expect("projection needs >= 2 particles");
            out.copy_from_slice(&proj.s_perp);
        }
        DynKind::Direct => {
            out.copy_from_slice(speed);
        }
    }
}

/// Advance a cell's velocities through tau in [0, 1], accumulating the
/// kinetic-cost and log-determinant quadrature sums at the interior nodes.
pub fn integrate_trajectory<F: FieldEval>(
    velocities: &[f64],
    field: &F,
    wtilde: f64,
    config: &InnerConfig,
) -> Result<InnerTrajectory> {
    integrate_recorded(velocities, field, wtilde, config, None)
}

/// As [`integrate_trajectory`], optionally recording integrator internals for
/// a reverse sweep.
pub fn integrate_recorded<F: FieldEval>(
    velocities: &[f64],
    field: &F,
    wtilde: f64,
    config: &InnerConfig,
    mut tape: Option<&mut Tape>,
) -> Result<InnerTrajectory> {
    let d = field.d_v();
    let n = velocities.len() / d;
    let rule = gauss_legendre(config.quadrature)?;
    let k_nodes = rule.nodes.len();
    let mut grid = Vec::with_capacity(k_nodes + 2);
    grid.push(0.0);
    grid.extend_from_slice(&rule.nodes);
    grid.push(1.0);

    let mut speed = vec![0.0; n * d];
    let mut rhs = |tau: f64, z: &[f64], out: &mut [f64]| {
        let mut sp = vec![0.0; z.len()];
        drift(&config.kind, field, wtilde, tau, z, &mut sp, out);
    };

    let mut traj = InnerTrajectory {
        nodes: Vec::with_capacity(k_nodes + 2),
        node_speed: Vec::with_capacity(k_nodes),
        node_div: Vec::with_capacity(k_nodes),
        projections: Vec::new(),
        ell: vec![0.0; n],
        cost: 0.0,
        solver_iters: 0,
        quadrature: rule,
    };
    traj.nodes.push(velocities.to_vec());

    let mut z = velocities.to_vec();
    let mut jac = vec![0.0; n * d * d];
    for k in 0..=k_nodes {
        let tau_a = grid[k];
        let tau_b = grid[k + 1];
        match config.solver {
            SolverKind::Rk4 => {
                if let Some(t) = tape.as_deref_mut() {
                    // record stage inputs alongside the step
                    let h = tau_b - tau_a;
                    let mut k1 = vec![0.0; n * d];
                    let mut k2 = vec![0.0; n * d];
                    let mut k3 = vec![0.0; n * d];
                    let mut k4 = vec![0.0; n * d];
                    let u1 = z.clone();
                    rhs(tau_a, &u1, &mut k1);
                    let u2: Vec<f64> = (0..n * d).map(|i| z[i] + 0.5 * h * k1[i]).collect();
                    rhs(tau_a + 0.5 * h, &u2, &mut k2);
                    let u3: Vec<f64> = (0..n * d).map(|i| z[i] + 0.5 * h * k2[i]).collect();
                    rhs(tau_a + 0.5 * h, &u3, &mut k3);
                    let u4: Vec<f64> = (0..n * d).map(|i| z[i] + h * k3[i]).collect();
                    rhs(tau_b, &u4, &mut k4);
                    for i in 0..n * d {
                        z[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
                    }
                    t.rk4_stages.push([u1, u2, u3, u4]);
                } else {
                    z = rk4_advance(&z, &mut rhs, tau_a, tau_b);
                }
            }
            SolverKind::ImplicitMidpoint => {
                let (solved, iters) =
                    implicit_midpoint_step(&z, &mut rhs, tau_a, tau_b - tau_a, &config.broyden)?;
                traj.solver_iters += iters;
                // JFB convention: one differentiable re-application of G with
                // the solved state detached defines the next node.
                let mid: Vec<f64> = (0..n * d).map(|i| 0.5 * (z[i] + solved[i])).collect();
                let mut fval = vec![0.0; n * d];
                rhs(0.5 * (tau_a + tau_b), &mid, &mut fval);
                for i in 0..n * d {
                    z[i] += (tau_b - tau_a) * fval[i];
                }
                if let Some(t) = tape.as_deref_mut() {
                    t.midpoints.push(mid);
                }
            }
        }
        traj.nodes.push(z.clone());

        if k + 1 <= k_nodes {
            // interior node evaluation shared by the cost and ell integrands
            let tau = tau_b;
            let q = traj.quadrature.weights[k];
            field.eval_jac_batch(tau, &z, &mut speed, &mut jac);
            let mut div = vec![0.0; n];
            for i in 0..n {
                let mut tr = 0.0;
                for a in 0..d {
                    tr += jac[i * d * d + a * d + a];
                }
                div[i] = tr;
            }
            match &config.kind {
                DynKind::Landau(kp) => {
                    traj.cost += q * field::landau_cost(&z, &speed, kp);
                    let mut ldot = vec![0.0; n];
                    field::landau_logdet_integrand(&z, &speed, &jac, wtilde, kp, &mut ldot);
                    for i in 0..n {
                        traj.ell[i] += q * ldot[i];
                    }
                }
                DynKind::DoughertyProjected => {
                    let proj = field::dougherty_project_lenient(&speed, &z, d)?;
                    let cost: f64 = proj.s_perp.iter().map(|a| a * a).sum();
                    traj.cost += q * cost;
                    for i in 0..n {
                        traj.ell[i] += q
                            * field::dougherty_logdet_integrand(div[i], proj.energy_coeff, d);
                    }
                    traj.projections.push(NodeProjection {
                        mean_shift: proj.mean_shift.clone(),
                        energy_coeff: proj.energy_coeff,
                        u_mean: proj.u_mean.clone(),
                    });
                }
                DynKind::Direct => {
                    let cost: f64 = speed.iter().map(|a| a * a).sum();
                    traj.cost += q * cost;
                    for i in 0..n {
                        traj.ell[i] += q * div[i];
                    }
                }
            }
            traj.node_speed.push(speed.clone());
            traj.node_div.push(div);
        }
    }
    Ok(traj)
}
