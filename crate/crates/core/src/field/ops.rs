//! Batch operations that couple the velocity field to the particles: the
//! Landau pairwise drift and log-determinant integrand, the Dougherty
//! conservation projection, and their reverse-mode adjoints.
//!
//! All pairwise adjoints are written row-locally: row i accumulates every
//! contribution to its own cotangents, including those arising from ordered
//! pairs (j, i), using the parity of the kernel. Rows are independent, so
//! they parallelize without changing the reduction order.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::kernels::KernelParams;

const PAR_THRESHOLD: usize = 192;

#[inline]
fn scale_gp2(r: f64, r2: f64, gamma: f64) -> f64 {
    // |z|^(gamma+2), specialized for the common exponents
    if gamma == -3.0 {
        1.0 / r
    } else if gamma == -2.0 {
        1.0
    } else if gamma == 0.0 {
        r2
    } else if gamma == 1.0 {
        r2 * r
    } else {
        r.powf(gamma + 2.0)
    }
}

/// dz_i/dtau = wt * sum_{j != i} A(z_i - z_j)(s_i - s_j), written to `out`.
pub fn landau_drift(z: &[f64], s: &[f64], wt: f64, kp: &KernelParams, out: &mut [f64]) {
    let d = kp.d_v;
    let n = z.len() / d;
    let gamma = kp.gamma;
    let rc2 = kp.r_cut * kp.r_cut;
    let row = |i: usize, acc: &mut [f64]| {
        acc.fill(0.0);
        let zi = &z[i * d..(i + 1) * d];
        let si = &s[i * d..(i + 1) * d];
        let mut zd = [0.0; 3];
        let mut dd = [0.0; 3];
        for j in 0..n {
            if j == i {
                continue;
            }
            let zj = &z[j * d..(j + 1) * d];
            let sj = &s[j * d..(j + 1) * d];
            let mut r2 = 0.0;
            let mut zdotd = 0.0;
            for a in 0..d {
                zd[a] = zi[a] - zj[a];
                dd[a] = si[a] - sj[a];
                r2 += zd[a] * zd[a];
            }
            if r2 <= rc2 {
                continue;
            }
            for a in 0..d {
                zdotd += zd[a] * dd[a];
            }
            let sc = scale_gp2(r2.sqrt(), r2, gamma);
            let proj = zdotd / r2;
            for a in 0..d {
                acc[a] += sc * (dd[a] - zd[a] * proj);
            }
        }
        for a in 0..d {
            acc[a] *= wt;
        }
    };
    if n >= PAR_THRESHOLD {
        out.par_chunks_mut(d)
            .enumerate()
            .for_each(|(i, acc)| row(i, acc));
    } else {
        for (i, acc) in out.chunks_mut(d).enumerate() {
            row(i, acc);
        }
    }
}

/// Pairwise kinetic cost (1/2) sum_{i != j} (s_i - s_j)^T A(z_i - z_j)(s_i - s_j).
pub fn landau_cost(z: &[f64], s: &[f64], kp: &KernelParams) -> f64 {
    let d = kp.d_v;
    let n = z.len() / d;
    let gamma = kp.gamma;
    let rc2 = kp.r_cut * kp.r_cut;
    let row = |i: usize| -> f64 {
        let zi = &z[i * d..(i + 1) * d];
        let si = &s[i * d..(i + 1) * d];
        let mut acc = 0.0;
        let mut zd = [0.0; 3];
        let mut dd = [0.0; 3];
        for j in 0..n {
            if j == i {
                continue;
            }
            let zj = &z[j * d..(j + 1) * d];
            let sj = &s[j * d..(j + 1) * d];
            let mut r2 = 0.0;
            for a in 0..d {
                zd[a] = zi[a] - zj[a];
                dd[a] = si[a] - sj[a];
                r2 += zd[a] * zd[a];
            }
            if r2 <= rc2 {
                continue;
            }
            let mut d2 = 0.0;
            let mut zdotd = 0.0;
            for a in 0..d {
                d2 += dd[a] * dd[a];
                zdotd += zd[a] * dd[a];
            }
            let sc = scale_gp2(r2.sqrt(), r2, gamma);
            acc += sc * (d2 - zdotd * zdotd / r2);
        }
        0.5 * acc
    };
    if n >= PAR_THRESHOLD {
        (0..n)
            .into_par_iter()
            .map(row)
            .collect::<Vec<_>>()
            .iter()
            .sum()
    } else {
        (0..n).map(row).sum()
    }
}

/// ldot_i = wt * sum_{j != i} [ Tr(A(z_ij) J_i) + div A(z_ij) . (s_i - s_j) ],
/// the instantaneous log-determinant rate along the Landau drift.
/// `jac` holds the field Jacobians at each z_i, row-major n x (d x d).
pub fn landau_logdet_integrand(
    z: &[f64],
    s: &[f64],
    jac: &[f64],
    wt: f64,
    kp: &KernelParams,
    out: &mut [f64],
) {
    let d = kp.d_v;
    let n = z.len() / d;
    let gamma = kp.gamma;
    let rc2 = kp.r_cut * kp.r_cut;
    let row = |i: usize| -> f64 {
        let zi = &z[i * d..(i + 1) * d];
        let si = &s[i * d..(i + 1) * d];
        let ji = &jac[i * d * d..(i + 1) * d * d];
        let mut tr_j = 0.0;
        for a in 0..d {
            tr_j += ji[a * d + a];
        }
        let mut acc = 0.0;
        let mut zd = [0.0; 3];
        for j in 0..n {
            if j == i {
                continue;
            }
            let zj = &z[j * d..(j + 1) * d];
            let sj = &s[j * d..(j + 1) * d];
            let mut r2 = 0.0;
            for a in 0..d {
                zd[a] = zi[a] - zj[a];
                r2 += zd[a] * zd[a];
            }
            if r2 <= rc2 {
                continue;
            }
            let r = r2.sqrt();
            let sc = scale_gp2(r, r2, gamma);
            // Tr(A J) = sc (Tr J - e^T J e)
            let mut zjz = 0.0;
            for a in 0..d {
                let mut jz = 0.0;
                for b in 0..d {
                    jz += ji[a * d + b] * zd[b];
                }
                zjz += zd[a] * jz;
            }
            acc += sc * (tr_j - zjz / r2);
            // div A . (s_i - s_j) = -(d-1) |z|^gamma z . (s_i - s_j)
            let rg = sc / r2;
            let mut zdots = 0.0;
            for a in 0..d {
                zdots += zd[a] * (si[a] - sj[a]);
            }
            acc -= (d as f64 - 1.0) * rg * zdots;
        }
        wt * acc
    };
    if n >= PAR_THRESHOLD {
        let vals: Vec<f64> = (0..n).into_par_iter().map(row).collect();
        out.copy_from_slice(&vals);
    } else {
        for (i, o) in out.iter_mut().enumerate() {
            *o = row(i);
        }
    }
}

/// Adjoint of [`landau_drift`]: given the drift cotangent `fbar`, accumulate
/// cotangents into `sbar` and `zbar`.
pub fn landau_drift_vjp(
    z: &[f64],
    s: &[f64],
    wt: f64,
    kp: &KernelParams,
    fbar: &[f64],
    sbar: &mut [f64],
    zbar: &mut [f64],
) {
    let d = kp.d_v;
    let n = z.len() / d;
    let gamma = kp.gamma;
    let rc2 = kp.r_cut * kp.r_cut;
    let row = |i: usize, srow: &mut [f64], zrow: &mut [f64]| {
        let zi = &z[i * d..(i + 1) * d];
        let si = &s[i * d..(i + 1) * d];
        let fi = &fbar[i * d..(i + 1) * d];
        let mut zd = [0.0; 3];
        let mut dd = [0.0; 3];
        let mut fd = [0.0; 3];
        for j in 0..n {
            if j == i {
                continue;
            }
            let zj = &z[j * d..(j + 1) * d];
            let sj = &s[j * d..(j + 1) * d];
            let fj = &fbar[j * d..(j + 1) * d];
            let mut r2 = 0.0;
            for a in 0..d {
                zd[a] = zi[a] - zj[a];
                dd[a] = si[a] - sj[a];
                fd[a] = fi[a] - fj[a];
                r2 += zd[a] * zd[a];
            }
            if r2 <= rc2 {
                continue;
            }
            let r = r2.sqrt();
            let sc = scale_gp2(r, r2, gamma);
            let rg = sc / r2;
            // sbar_i += wt A(z) (fbar_i - fbar_j)
            let mut zdotf = 0.0;
            let mut zdotd = 0.0;
            let mut fdotd = 0.0;
            for a in 0..d {
                zdotf += zd[a] * fd[a];
                zdotd += zd[a] * dd[a];
                fdotd += fd[a] * dd[a];
            }
            for a in 0..d {
                srow[a] += wt * sc * (fd[a] - zd[a] * zdotf / r2);
            }
            // zbar_i += grad_z <M, A(z)> with M = wt (fbar_i - fbar_j) d^T
            let m_tr = wt * fdotd;
            let zmz = wt * zdotf * zdotd;
            let c1 = (gamma + 2.0) * rg * m_tr - gamma * rg / r2 * zmz;
            for a in 0..d {
                let mz_sym = wt * (fd[a] * zdotd + dd[a] * zdotf);
                zrow[a] += c1 * zd[a] - rg * mz_sym;
            }
        }
    };
    if n >= PAR_THRESHOLD {
        sbar.par_chunks_mut(d)
            .zip(zbar.par_chunks_mut(d))
            .enumerate()
            .for_each(|(i, (srow, zrow))| row(i, srow, zrow));
    } else {
        for (i, (srow, zrow)) in sbar.chunks_mut(d).zip(zbar.chunks_mut(d)).enumerate() {
            row(i, srow, zrow);
        }
    }
}

/// Adjoint of [`landau_cost`] for a scalar cotangent `cbar`.
pub fn landau_cost_vjp(
    z: &[f64],
    s: &[f64],
    kp: &KernelParams,
    cbar: f64,
    sbar: &mut [f64],
    zbar: &mut [f64],
) {
    let d = kp.d_v;
    let n = z.len() / d;
    let gamma = kp.gamma;
    let rc2 = kp.r_cut * kp.r_cut;
    let row = |i: usize, srow: &mut [f64], zrow: &mut [f64]| {
        let zi = &z[i * d..(i + 1) * d];
        let si = &s[i * d..(i + 1) * d];
        let mut zd = [0.0; 3];
        let mut dd = [0.0; 3];
        for j in 0..n {
            if j == i {
                continue;
            }
            let zj = &z[j * d..(j + 1) * d];
            let sj = &s[j * d..(j + 1) * d];
            let mut r2 = 0.0;
            for a in 0..d {
                zd[a] = zi[a] - zj[a];
                dd[a] = si[a] - sj[a];
                r2 += zd[a] * zd[a];
            }
            if r2 <= rc2 {
                continue;
            }
            let r = r2.sqrt();
            let sc = scale_gp2(r, r2, gamma);
            let rg = sc / r2;
            let mut d2 = 0.0;
            let mut zdotd = 0.0;
            for a in 0..d {
                d2 += dd[a] * dd[a];
                zdotd += zd[a] * dd[a];
            }
            // sbar_i += 2 cbar A(z) d
            for a in 0..d {
                srow[a] += 2.0 * cbar * sc * (dd[a] - zd[a] * zdotd / r2);
            }
            // zbar_i += grad_z <cbar d d^T, A(z)>
            let m_tr = cbar * d2;
            let zmz = cbar * zdotd * zdotd;
            let c1 = (gamma + 2.0) * rg * m_tr - gamma * rg / r2 * zmz;
            for a in 0..d {
                let mz_sym = 2.0 * cbar * dd[a] * zdotd;
                zrow[a] += c1 * zd[a] - rg * mz_sym;
            }
        }
    };
    if n >= PAR_THRESHOLD {
        sbar.par_chunks_mut(d)
            .zip(zbar.par_chunks_mut(d))
            .enumerate()
            .for_each(|(i, (srow, zrow))| row(i, srow, zrow));
    } else {
        for (i, (srow, zrow)) in sbar.chunks_mut(d).zip(zbar.chunks_mut(d)).enumerate() {
            row(i, srow, zrow);
        }
    }
}

/// Adjoint of [`landau_logdet_integrand`] for per-particle cotangents `lbar`.
pub fn landau_logdet_vjp(
    z: &[f64],
    s: &[f64],
    jac: &[f64],
    wt: f64,
    kp: &KernelParams,
    lbar: &[f64],
    sbar: &mut [f64],
    zbar: &mut [f64],
    jbar: &mut [f64],
) {
    let d = kp.d_v;
    let n = z.len() / d;
    let gamma = kp.gamma;
    let rc2 = kp.r_cut * kp.r_cut;
    let row = |i: usize, srow: &mut [f64], zrow: &mut [f64], jrow: &mut [f64]| {
        let zi = &z[i * d..(i + 1) * d];
        let si = &s[i * d..(i + 1) * d];
        let ji = &jac[i * d * d..(i + 1) * d * d];
        let li = lbar[i];
        let mut tri = 0.0;
        for a in 0..d {
            tri += ji[a * d + a];
        }
        let mut zd = [0.0; 3];
        let mut dd = [0.0; 3];
        for j in 0..n {
            if j == i {
                continue;
            }
            let zj = &z[j * d..(j + 1) * d];
            let sj = &s[j * d..(j + 1) * d];
            let jj = &jac[j * d * d..(j + 1) * d * d];
            let lj = lbar[j];
            let mut r2 = 0.0;
            for a in 0..d {
                zd[a] = zi[a] - zj[a];
                dd[a] = si[a] - sj[a];
                r2 += zd[a] * zd[a];
            }
            if r2 <= rc2 {
                continue;
            }
            let r = r2.sqrt();
            let sc = scale_gp2(r, r2, gamma);
            let rg = sc / r2;
            // J_i cotangent: wt * li * A(z_ij)
            for a in 0..d {
                for b in 0..d {
                    let aab = sc * ((a == b) as usize as f64 - zd[a] * zd[b] / r2);
                    jrow[a * d + b] += wt * li * aab;
                }
            }
            // s cotangent from the divergence term, combined over both orderings
            let wl = wt * (li + lj);
            for a in 0..d {
                srow[a] -= (d as f64 - 1.0) * rg * wl * zd[a];
            }
            // z cotangent from Tr(A J) with M = wt (li J_i^T + lj J_j^T)
            let mut trj = 0.0;
            for a in 0..d {
                trj += jj[a * d + a];
            }
            let m_tr = wt * (li * tri + lj * trj);
            let mut zjiz = 0.0;
            let mut zjjz = 0.0;
            let mut mz = [0.0; 3];
            for a in 0..d {
                let mut jiz = 0.0;
                let mut jiz_t = 0.0;
                let mut jjz = 0.0;
                let mut jjz_t = 0.0;
                for b in 0..d {
                    jiz += ji[a * d + b] * zd[b];
                    jiz_t += ji[b * d + a] * zd[b];
                    jjz += jj[a * d + b] * zd[b];
                    jjz_t += jj[b * d + a] * zd[b];
                }
                zjiz += zd[a] * jiz;
                zjjz += zd[a] * jjz;
                mz[a] = wt * (li * (jiz + jiz_t) + lj * (jjz + jjz_t));
            }
            let zmz = wt * (li * zjiz + lj * zjjz);
            let c1 = (gamma + 2.0) * rg * m_tr - gamma * rg / r2 * zmz;
            for a in 0..d {
                zrow[a] += c1 * zd[a] - rg * mz[a];
            }
            // z cotangent from the divergence term: even gradient, combined
            // cotangent gbar = wt (li + lj) d_ij
            let gz: f64 = (0..d).map(|a| dd[a] * zd[a]).sum();
            let cdiv = -(d as f64 - 1.0) * wl;
            for a in 0..d {
                zrow[a] += cdiv * (gamma * rg / r2 * gz * zd[a] + rg * dd[a]);
            }
        }
    };
    if n >= PAR_THRESHOLD {
        sbar.par_chunks_mut(d)
            .zip(zbar.par_chunks_mut(d).zip(jbar.par_chunks_mut(d * d)))
            .enumerate()
            .for_each(|(i, (srow, (zrow, jrow)))| row(i, srow, zrow, jrow));
    } else {
        for i in 0..n {
            // split disjoint rows manually in the serial path
            let (sa, sb) = sbar.split_at_mut(i * d);
            let _ = sa;
            let srow = &mut sb[..d];
            let (za, zb) = zbar.split_at_mut(i * d);
            let _ = za;
            let zrow = &mut zb[..d];
            let (ja, jb) = jbar.split_at_mut(i * d * d);
            let _ = ja;
            let jrow = &mut jb[..d * d];
            row(i, srow, zrow, jrow);
        }
    }
}

/// Result of the Dougherty conservation projection on one particle batch.
#[derive(Debug, Clone)]
pub struct Projection {
    /// s_perp_i = s_i - mean(s) - c (z_i - u), flat n x d.
    pub s_perp: Vec<f64>,
    /// mean(s), the momentum shift removed from the field.
    pub mean_shift: Vec<f64>,
    /// c = sum_j s_j.(z_j - u) / sum_j |z_j - u|^2, for the log-det formula.
    pub energy_coeff: f64,
    /// Particle mean u of z.
    pub u_mean: Vec<f64>,
    /// Fallback marker: the energy projection was skipped (zero spread).
    pub mean_only: bool,
}

/// Particle form of the momentum/energy tangent-space projection.
/// Errors on zero velocity spread; callers may fall back to
/// [`dougherty_project_lenient`].
pub fn dougherty_project(s: &[f64], z: &[f64], d: usize) -> Result<Projection> {
    let proj = dougherty_project_lenient(s, z, d)?;
    if proj.mean_only {
        return Err(Error::Domain(
            "degenerate energy projection: all particle velocities equal".into(),
        ));
    }
    Ok(proj)
}

/// As [`dougherty_project`], but degrades to mean-only projection (c = 0)
/// with a warning when the velocity spread vanishes.
pub fn dougherty_project_lenient(s: &[f64], z: &[f64], d: usize) -> Result<Projection> {
    let n = z.len() / d;
    if n < 2 {
        return Err(Error::InvalidSpec(
            "projection needs at least two particles".into(),
        ));
    }
    let mut u = vec![0.0; d];
    let mut mean_s = vec![0.0; d];
    for i in 0..n {
        for a in 0..d {
            u[a] += z[i * d + a];
            mean_s[a] += s[i * d + a];
        }
    }
    for a in 0..d {
        u[a] /= n as f64;
        mean_s[a] /= n as f64;
    }
    let mut num = 0.0;
    let mut den = 0.0;
    for i in 0..n {
        for a in 0..d {
            let zc = z[i * d + a] - u[a];
            num += s[i * d + a] * zc;
            den += zc * zc;
        }
    }
    let mean_only = den == 0.0;
    if mean_only {
        eprintln!("warning: degenerate velocity spread, using mean-only projection");
    }
    let c = if mean_only { 0.0 } else { num / den };
    let mut s_perp = vec![0.0; n * d];
    for i in 0..n {
        for a in 0..d {
            let zc = z[i * d + a] - u[a];
            s_perp[i * d + a] = s[i * d + a] - mean_s[a] - c * zc;
        }
    }
    Ok(Projection {
        s_perp,
        mean_shift: mean_s,
        energy_coeff: c,
        u_mean: u,
        mean_only,
    })
}

/// Adjoint of the projection: given cotangents `pbar` on s_perp and `cbar`
/// on the energy coefficient, accumulate into `sbar` and `zbar`.
pub fn dougherty_project_vjp(
    s: &[f64],
    z: &[f64],
    proj: &Projection,
    pbar: &[f64],
    cbar: f64,
    sbar: &mut [f64],
    zbar: &mut [f64],
) {
    let d = proj.u_mean.len();
    let n = z.len() / d;
    let mut b = vec![0.0; d];
    let mut g = 0.0;
    for i in 0..n {
        for a in 0..d {
            b[a] += pbar[i * d + a];
            g += pbar[i * d + a] * (z[i * d + a] - proj.u_mean[a]);
        }
    }
    if proj.mean_only {
        for i in 0..n {
            for a in 0..d {
                sbar[i * d + a] += pbar[i * d + a] - b[a] / n as f64;
            }
        }
        return;
    }
    let mut den = 0.0;
    for i in 0..n {
        for a in 0..d {
            let zc = z[i * d + a] - proj.u_mean[a];
            den += zc * zc;
        }
    }
    let c = proj.energy_coeff;
    let w = (cbar - g) / den;
    for i in 0..n {
        for a in 0..d {
            let zc = z[i * d + a] - proj.u_mean[a];
            let sc = s[i * d + a] - proj.mean_shift[a];
            sbar[i * d + a] += pbar[i * d + a] - b[a] / n as f64 + w * zc;
            zbar[i * d + a] +=
                -c * (pbar[i * d + a] - b[a] / n as f64) + w * (sc - 2.0 * c * zc);
        }
    }
}

/// Dougherty log-det rate: ldot_i = div s(tau, z_i) - d_v * c.
pub fn dougherty_logdet_integrand(divergence: f64, energy_coeff: f64, d_v: usize) -> f64 {
    divergence - d_v as f64 * energy_coeff
}
