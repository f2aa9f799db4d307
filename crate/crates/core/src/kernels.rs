//! Closed-form collision-physics ingredients: the Landau matrix kernel
//! `A(z) = |z|^(gamma+2) (I - z z^T / |z|^2)`, its row divergence, Maxwellian
//! evaluation, and distance-to-equilibrium diagnostics.

use crate::ensemble::MacroMoments;
use crate::error::{Error, Result};

/// Parameters of the Landau interaction kernel.
#[derive(Debug, Clone, Copy)]
pub struct KernelParams {
    /// Interaction exponent; -3 for Coulomb.
    pub gamma: f64,
    /// Velocity dimension.
    pub d_v: usize,
    /// Pairs closer than this are treated as non-interacting.
    pub r_cut: f64,
}

impl KernelParams {
    pub fn new(gamma: f64, d_v: usize) -> Self {
        KernelParams {
            gamma,
            d_v,
            r_cut: 1e-8,
        }
    }

    pub fn coulomb(d_v: usize) -> Self {
        Self::new(-3.0, d_v)
    }
}

/// The matrix kernel A(z), written into `out` (row-major d_v x d_v).
/// Zero matrix below the cutoff radius.
pub fn landau_a(z: &[f64], params: &KernelParams, out: &mut [f64]) {
    let d = params.d_v;
    debug_assert_eq!(z.len(), d);
    debug_assert_eq!(out.len(), d * d);
    let r2: f64 = z.iter().map(|a| a * a).sum();
    let r = r2.sqrt();
    if r <= params.r_cut {
        out.fill(0.0);
        return;
    }
    // |z|^(gamma+2) (I - e e^T), e = z/|z|
    let scale = r.powf(params.gamma + 2.0);
    for a in 0..d {
        for b in 0..d {
            let proj = if a == b { 1.0 } else { 0.0 };
            out[a * d + b] = scale * (proj - z[a] * z[b] / r2);
        }
    }
}

/// Convenience allocation form of [`landau_a`].
pub fn landau_a_mat(z: &[f64], params: &KernelParams) -> Vec<f64> {
    let d = params.d_v;
    let mut out = vec![0.0; d * d];
    landau_a(z, params, &mut out);
    out
}

/// Row-wise divergence of A: g_b(z) = sum_a d/dz_a A_ab(z) = -(d_v - 1) |z|^gamma z_b.
/// Zero vector below the cutoff radius.
pub fn landau_a_div(z: &[f64], params: &KernelParams, out: &mut [f64]) {
    let d = params.d_v;
    debug_assert_eq!(z.len(), d);
    debug_assert_eq!(out.len(), d);
    let r2: f64 = z.iter().map(|a| a * a).sum();
    let r = r2.sqrt();
    if r <= params.r_cut {
        out.fill(0.0);
        return;
    }
    let scale = -(d as f64 - 1.0) * r.powf(params.gamma);
    for b in 0..d {
        out[b] = scale * z[b];
    }
}

/// Kernel application A(z) x without materializing the matrix:
/// A x = |z|^(gamma+2) (x - e (e.x)).
#[inline]
pub fn landau_a_apply(z: &[f64], x: &[f64], params: &KernelParams, out: &mut [f64]) {
    let d = params.d_v;
    let r2: f64 = z.iter().map(|a| a * a).sum();
    let r = r2.sqrt();
    if r <= params.r_cut {
        out.fill(0.0);
        return;
    }
    let scale = r.powf(params.gamma + 2.0);
    let zx: f64 = z.iter().zip(x).map(|(a, b)| a * b).sum();
    for b in 0..d {
        out[b] = scale * (x[b] - z[b] * zx / r2);
    }
}

/// Quadratic form x^T A(z) x = |z|^(gamma+2) (|x|^2 - (e.x)^2).
#[inline]
pub fn landau_a_quad(z: &[f64], x: &[f64], params: &KernelParams) -> f64 {
    let r2: f64 = z.iter().map(|a| a * a).sum();
    let r = r2.sqrt();
    if r <= params.r_cut {
        return 0.0;
    }
    let x2: f64 = x.iter().map(|a| a * a).sum();
    let zx: f64 = z.iter().zip(x).map(|(a, b)| a * b).sum();
    r.powf(params.gamma + 2.0) * (x2 - zx * zx / r2)
}

/// Trace contraction Tr(A(z) J) = |z|^(gamma+2) (Tr J - e^T J e), J row-major d x d.
#[inline]
pub fn landau_a_trace(z: &[f64], jac: &[f64], params: &KernelParams) -> f64 {
    let d = params.d_v;
    let r2: f64 = z.iter().map(|a| a * a).sum();
    let r = r2.sqrt();
    if r <= params.r_cut {
        return 0.0;
    }
    let mut tr = 0.0;
    let mut zjz = 0.0;
    for a in 0..d {
        tr += jac[a * d + a];
        for b in 0..d {
            zjz += z[a] * jac[a * d + b] * z[b];
        }
    }
    r.powf(params.gamma + 2.0) * (tr - zjz / r2)
}

/// Gradient of <M, A(z)> with respect to z, accumulated into `zbar`.
/// <M, A> = |z|^(g+2) tr M - |z|^g z^T M z, so
/// grad = (g+2)|z|^g tr(M) z - g |z|^(g-2) (z^T M z) z - |z|^g (M + M^T) z.
/// `m_tr` = tr M, `zmz` = z^T M z, `mz_sym` = (M + M^T) z precomputed by the caller.
#[inline]
pub fn landau_a_vjp_z(
    z: &[f64],
    m_tr: f64,
    zmz: f64,
    mz_sym: &[f64],
    params: &KernelParams,
    zbar: &mut [f64],
) {
    let d = params.d_v;
    let r2: f64 = z.iter().map(|a| a * a).sum();
    let r = r2.sqrt();
    if r <= params.r_cut {
        return;
    }
    let g = params.gamma;
    let rg = r.powf(g);
    let c1 = (g + 2.0) * rg * m_tr - g * rg / r2 * zmz;
    for b in 0..d {
        zbar[b] += c1 * z[b] - rg * mz_sym[b];
    }
}

/// Gradient of gbar . g(z) with respect to z, accumulated into `zbar`,
/// where g(z) = -(d_v - 1)|z|^gamma z.
#[inline]
pub fn landau_a_div_vjp_z(
    z: &[f64],
    gbar: &[f64],
    params: &KernelParams,
    zbar: &mut [f64],
) {
    let d = params.d_v;
    let r2: f64 = z.iter().map(|a| a * a).sum();
    let r = r2.sqrt();
    if r <= params.r_cut {
        return;
    }
    let g = params.gamma;
    let rg = r.powf(g);
    let gz: f64 = gbar.iter().zip(z).map(|(a, b)| a * b).sum();
    let c = -(d as f64 - 1.0);
    for b in 0..d {
        zbar[b] += c * (g * rg / r2 * gz * z[b] + rg * gbar[b]);
    }
}

/// Local Maxwellian rho (2 pi T)^(-d_v/2) exp(-|v - u|^2 / (2T)).
pub fn maxwellian(moments: &MacroMoments, v: &[f64]) -> Result<f64> {
    if moments.temperature <= 0.0 {
        return Err(Error::Domain(format!(
            "maxwellian requires T > 0, got {}",
            moments.temperature
        )));
    }
    if moments.rho <= 0.0 {
        return Err(Error::Domain(format!(
            "maxwellian requires rho > 0, got {}",
            moments.rho
        )));
    }
    let d = moments.u.len();
    debug_assert_eq!(v.len(), d);
    let t = moments.temperature;
    let mut q = 0.0;
    for a in 0..d {
        let dv = v[a] - moments.u[a];
        q += dv * dv;
    }
    let norm = (2.0 * std::f64::consts::PI * t).powf(-(d as f64) / 2.0);
    Ok(moments.rho * norm * (-q / (2.0 * t)).exp())
}

/// Particle L1 distance to the local Maxwellian of the same particle set:
/// (1/N) sum_i |exp(logf_i) - M_U(v_i)| with U the set's own moments.
pub fn l1_to_maxwellian(velocities: &[f64], logf: &[f64], d_v: usize, weight: f64) -> Result<f64> {
    let n = logf.len();
    if n == 0 {
        return Err(Error::EmptyCell);
    }
    let moments = crate::ensemble::moments(velocities, d_v, weight, logf)?;
    let mut acc = 0.0;
    for i in 0..n {
        let v = &velocities[i * d_v..(i + 1) * d_v];
        acc += (logf[i].exp() - maxwellian(&moments, v)?).abs();
    }
    Ok(acc / n as f64)
}
