//! Trainable velocity field and the operations coupling it to particles.

pub mod mlp;
pub mod ops;

pub use mlp::{FieldGradient, MlpScratch, VelocityField};
pub use ops::{
    dougherty_logdet_integrand, dougherty_project, dougherty_project_lenient,
    dougherty_project_vjp, landau_cost, landau_cost_vjp, landau_drift, landau_drift_vjp,
    landau_logdet_integrand, landau_logdet_vjp, Projection,
};

use std::io::{Read, Write};
use std::path::Path;

use rayon::prelude::*;

use crate::error::{Error, Result};

/// Batch size for thread-parallel field evaluation; fixed so reductions are
/// chunk-ordered and bitwise reproducible at any thread count.
const CHUNK: usize = 64;

/// Read access to a velocity field s(tau, v). Implemented by the MLP and by
/// closed-form fields used in oracles and the heat lab.
pub trait FieldEval: Sync {
    fn d_v(&self) -> usize;
    /// Evaluate s at a batch of points, `z` and `out` flat n x d.
    fn eval_batch(&self, tau: f64, z: &[f64], out: &mut [f64]);
    /// Evaluate s and its velocity Jacobian (flat n x d x d).
    fn eval_jac_batch(&self, tau: f64, z: &[f64], out_s: &mut [f64], out_jac: &mut [f64]);
}

impl FieldEval for VelocityField {
    fn d_v(&self) -> usize {
        self.d_v
    }

    fn eval_batch(&self, tau: f64, z: &[f64], out: &mut [f64]) {
        let d = self.d_v;
        let n = z.len() / d;
        if n >= CHUNK * 2 {
            out.par_chunks_mut(CHUNK * d)
                .zip(z.par_chunks(CHUNK * d))
                .for_each(|(ochunk, zchunk)| {
                    let mut scratch = MlpScratch::new(self);
                    for (o, zi) in ochunk.chunks_mut(d).zip(zchunk.chunks(d)) {
                        self.forward(tau, zi, &mut scratch, o);
                    }
                });
        } else {
            let mut scratch = MlpScratch::new(self);
            for (o, zi) in out.chunks_mut(d).zip(z.chunks(d)) {
                self.forward(tau, zi, &mut scratch, o);
            }
        }
    }

    fn eval_jac_batch(&self, tau: f64, z: &[f64], out_s: &mut [f64], out_jac: &mut [f64]) {
        let d = self.d_v;
        let n = z.len() / d;
        if n >= CHUNK * 2 {
            out_s
                .par_chunks_mut(CHUNK * d)
                .zip(out_jac.par_chunks_mut(CHUNK * d * d))
                .zip(z.par_chunks(CHUNK * d))
                .for_each(|((schunk, jchunk), zchunk)| {
                    let mut scratch = MlpScratch::new(self);
                    for ((o, j), zi) in schunk
                        .chunks_mut(d)
                        .zip(jchunk.chunks_mut(d * d))
                        .zip(zchunk.chunks(d))
                    {
                        self.forward_jac(tau, zi, &mut scratch, o, j);
                    }
                });
        } else {
            let mut scratch = MlpScratch::new(self);
            for ((o, j), zi) in out_s
                .chunks_mut(d)
                .zip(out_jac.chunks_mut(d * d))
                .zip(z.chunks(d))
            {
                self.forward_jac(tau, zi, &mut scratch, o, j);
            }
        }
    }
}

impl VelocityField {
    /// Batch adjoint of eval: accumulates parameter gradients of
    /// sum_i sbar_i . s(tau, z_i) into `grad` and input gradients into `zbar`.
    pub fn vjp_batch(
        &self,
        tau: f64,
        z: &[f64],
        sbar: &[f64],
        zbar: &mut [f64],
        grad: &mut FieldGradient,
    ) {
        let d = self.d_v;
        let n = z.len() / d;
        if n >= CHUNK * 2 {
            let partials: Vec<FieldGradient> = zbar
                .par_chunks_mut(CHUNK * d)
                .zip(z.par_chunks(CHUNK * d).zip(sbar.par_chunks(CHUNK * d)))
                .map(|(zbchunk, (zchunk, sbchunk))| {
                    let mut scratch = MlpScratch::new(self);
                    let mut local = FieldGradient::zeros_like(self);
                    let mut s = vec![0.0; d];
                    for ((zb, zi), sb) in zbchunk
                        .chunks_mut(d)
                        .zip(zchunk.chunks(d))
                        .zip(sbchunk.chunks(d))
                    {
                        self.forward(tau, zi, &mut scratch, &mut s);
                        self.vjp(&mut scratch, sb, &mut local, zb);
                    }
                    local
                })
                .collect();
            for p in &partials {
                grad.add_assign(p);
            }
        } else {
            let mut scratch = MlpScratch::new(self);
            let mut s = vec![0.0; d];
            for i in 0..n {
                self.forward(tau, &z[i * d..(i + 1) * d], &mut scratch, &mut s);
                self.vjp(
                    &mut scratch,
                    &sbar[i * d..(i + 1) * d],
                    grad,
                    &mut zbar[i * d..(i + 1) * d],
                );
            }
        }
    }

    /// Batch adjoint of eval_jac: cotangents on both the values (`sbar`) and
    /// the Jacobians (`jbar`).
    pub fn vjp_jac_batch(
        &self,
        tau: f64,
        z: &[f64],
        sbar: &[f64],
        jbar: &[f64],
        zbar: &mut [f64],
        grad: &mut FieldGradient,
    ) {
        let d = self.d_v;
        let n = z.len() / d;
        if n >= CHUNK * 2 {
            let partials: Vec<FieldGradient> = zbar
                .par_chunks_mut(CHUNK * d)
                .zip(
                    z.par_chunks(CHUNK * d)
                        .zip(sbar.par_chunks(CHUNK * d).zip(jbar.par_chunks(CHUNK * d * d))),
                )
                .map(|(zbchunk, (zchunk, (sbchunk, jbchunk)))| {
                    let mut scratch = MlpScratch::new(self);
                    let mut local = FieldGradient::zeros_like(self);
                    let mut s = vec![0.0; d];
                    let mut jac = vec![0.0; d * d];
                    for (((zb, zi), sb), jb) in zbchunk
                        .chunks_mut(d)
                        .zip(zchunk.chunks(d))
                        .zip(sbchunk.chunks(d))
                        .zip(jbchunk.chunks(d * d))
                    {
                        self.forward_jac(tau, zi, &mut scratch, &mut s, &mut jac);
                        self.vjp_with_jac(&mut scratch, sb, jb, &mut local, zb);
                    }
                    local
                })
                .collect();
            for p in &partials {
                grad.add_assign(p);
            }
        } else {
            let mut scratch = MlpScratch::new(self);
            let mut s = vec![0.0; d];
            let mut jac = vec![0.0; d * d];
            for i in 0..n {
                self.forward_jac(tau, &z[i * d..(i + 1) * d], &mut scratch, &mut s, &mut jac);
                self.vjp_with_jac(
                    &mut scratch,
                    &sbar[i * d..(i + 1) * d],
                    &jbar[i * d * d..(i + 1) * d * d],
                    grad,
                    &mut zbar[i * d..(i + 1) * d],
                );
            }
        }
    }

    /// Serialize parameters (order W_1, b_1, ..., W_L, b_L, row-major) to a
    /// flat binary checkpoint.
    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        let mut file = std::fs::File::create(path)?;
        file.write_all(b"APJKOFLD")?;
        for v in [1u32, self.d_v as u32, self.layers as u32, self.width as u32] {
            file.write_all(&v.to_le_bytes())?;
        }
        for p in self.params() {
            file.write_all(&p.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn load_checkpoint(path: &Path) -> Result<Self> {
        let mut file = std::fs::File::open(path)?;
        let mut magic = [0u8; 8];
        file.read_exact(&mut magic)?;
        if &magic != b"APJKOFLD" {
            return Err(Error::InvalidSpec("not a field checkpoint".into()));
        }
        let mut word = [0u8; 4];
        let mut next = || -> Result<u32> {
            file.read_exact(&mut word)?;
            Ok(u32::from_le_bytes(word))
        };
        let version = next()?;
        if version != 1 {
            return Err(Error::InvalidSpec(format!(
                "unsupported checkpoint version {version}"
            )));
        }
        let d_v = next()? as usize;
        let layers = next()? as usize;
        let width = next()? as usize;
        let mut field = VelocityField::zeros(d_v, layers, width);
        let mut buf = [0u8; 8];
        for p in field.params_mut() {
            file.read_exact(&mut buf)?;
            *p = f64::from_le_bytes(buf);
        }
        Ok(field)
    }
}

/// Spec-level constructor: biases zero, truncated-normal weights.
pub fn init_field(d_v: usize, layers: usize, width: usize, seed: u64) -> Result<VelocityField> {
    VelocityField::init(d_v, layers, width, seed)
}

/// Single-point field evaluation.
pub fn eval_field(field: &VelocityField, tau: f64, v: &[f64]) -> Vec<f64> {
    let mut scratch = MlpScratch::new(field);
    let mut out = vec![0.0; field.d_v];
    field.forward(tau, v, &mut scratch, &mut out);
    out
}

/// Exact velocity Jacobian (row-major d x d) and its trace.
pub fn field_jacobian(field: &VelocityField, tau: f64, v: &[f64]) -> (Vec<f64>, f64) {
    let mut scratch = MlpScratch::new(field);
    let d = field.d_v;
    let mut s = vec![0.0; d];
    let mut jac = vec![0.0; d * d];
    field.forward_jac(tau, v, &mut scratch, &mut s, &mut jac);
    let div = (0..d).map(|a| jac[a * d + a]).sum();
    (jac, div)
}

// ---------------------------------------------------------------------------
// Closed-form fields (oracles, heat-lab linear variants)
// ---------------------------------------------------------------------------

/// s(tau, v) = coeff * (v - center); Jacobian coeff * I.
#[derive(Debug, Clone)]
pub struct LinearField {
    pub d_v: usize,
    pub coeff: f64,
    pub center: Vec<f64>,
}

impl FieldEval for LinearField {
    fn d_v(&self) -> usize {
        self.d_v
    }

    fn eval_batch(&self, _tau: f64, z: &[f64], out: &mut [f64]) {
        let d = self.d_v;
        for (o, zi) in out.chunks_mut(d).zip(z.chunks(d)) {
            for a in 0..d {
                o[a] = self.coeff * (zi[a] - self.center[a]);
            }
        }
    }

    fn eval_jac_batch(&self, tau: f64, z: &[f64], out_s: &mut [f64], out_jac: &mut [f64]) {
        let d = self.d_v;
        self.eval_batch(tau, z, out_s);
        out_jac.fill(0.0);
        for j in out_jac.chunks_mut(d * d) {
            for a in 0..d {
                j[a * d + a] = self.coeff;
            }
        }
    }
}

/// Constant field s(tau, v) = c.
#[derive(Debug, Clone)]
pub struct ConstField {
    pub value: Vec<f64>,
}

impl FieldEval for ConstField {
    fn d_v(&self) -> usize {
        self.value.len()
    }

    fn eval_batch(&self, _tau: f64, z: &[f64], out: &mut [f64]) {
        let d = self.value.len();
        for o in out.chunks_mut(d) {
            o.copy_from_slice(&self.value);
        }
        let _ = z;
    }

    fn eval_jac_batch(&self, tau: f64, z: &[f64], out_s: &mut [f64], out_jac: &mut [f64]) {
        self.eval_batch(tau, z, out_s);
        out_jac.fill(0.0);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn parameter_count() {
        // d_v=2, L=5, m=32: 32*3+32 + 3*(32*32+32) + 2*32+2 = 3362
        let f = init_field(2, 5, 32, 0).unwrap();
        assert_eq!(f.n_params(), 3362);
    }

    #[test]
    fn init_determinism() {
        let f = init_field(2, 5, 32, 9).unwrap();
        let g = init_field(2, 5, 32, 9).unwrap();
        assert_eq!(f.params(), g.params());
        let h = init_field(2, 5, 32, 10).unwrap();
        assert_ne!(f.params(), h.params());
    }

    #[test]
    fn init_weights_within_bound() {
        let f = init_field(2, 5, 32, 1).unwrap();
        // the loosest bound across layers is 2/sqrt(3)
        let bound = 2.0 / 3.0_f64.sqrt() + 1e-12;
        assert!(f.params().iter().all(|w| w.abs() <= bound));
    }

    #[test]
    fn zero_field_evaluates_to_zero() {
        let f = VelocityField::zeros(2, 5, 32);
        let out = eval_field(&f, 0.3, &[0.7, -0.4]);
        assert_eq!(out, vec![0.0, 0.0]);
        let (jac, div) = field_jacobian(&f, 0.3, &[0.7, -0.4]);
        assert!(jac.iter().all(|x| *x == 0.0));
        assert_eq!(div, 0.0);
    }

    #[test]
    fn final_bias_gives_constant_output() {
        let mut f = VelocityField::zeros(2, 3, 8);
        let n = f.n_params();
        f.params_mut()[n - 2] = 1.5;
        f.params_mut()[n - 1] = -0.25;
        for v in [[0.0, 0.0], [1.0, 2.0], [-3.0, 0.5]] {
            let out = eval_field(&f, 0.5, &v);
            assert_eq!(out, vec![1.5, -0.25]);
        }
    }

    #[test]
    fn field_is_continuous() {
        let f = init_field(2, 5, 32, 21).unwrap();
        let base = eval_field(&f, 0.4, &[0.3, -0.8]);
        for h in [1e-4, 1e-5] {
            let shifted = eval_field(&f, 0.4, &[0.3 + h, -0.8]);
            for a in 0..2 {
                assert!((shifted[a] - base[a]).abs() < 10.0 * h.max(1e-9) * (1.0 + base[a].abs()));
            }
        }
    }

    #[test]
    fn jacobian_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        for &d in &[1usize, 2, 3] {
            let f = init_field(d, 4, 16, 100 + d as u64).unwrap();
            for _ in 0..5 {
                let v: Vec<f64> = (0..d).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
                let tau: f64 = rng.random();
                let (jac, div) = field_jacobian(&f, tau, &v);
                let h = 1e-4;
                let mut tr = 0.0;
                for b in 0..d {
                    let mut vp = v.clone();
                    let mut vm = v.clone();
                    vp[b] += h;
                    vm[b] -= h;
                    let sp = eval_field(&f, tau, &vp);
                    let sm = eval_field(&f, tau, &vm);
                    for a in 0..d {
                        let fd = (sp[a] - sm[a]) / (2.0 * h);
                        assert!(
                            (jac[a * d + b] - fd).abs() < 1e-5,
                            "d={d} J[{a}][{b}]: {} vs {}",
                            jac[a * d + b],
                            fd
                        );
                    }
                }
                for a in 0..d {
                    tr += jac[a * d + a];
                }
                assert_relative_eq!(div, tr, epsilon = 1e-14);
            }
        }
    }

    /// Central-difference gradient of a scalar loss over all parameters.
    fn fd_param_grad<L: Fn(&VelocityField) -> f64>(
        field: &VelocityField,
        loss: L,
        h: f64,
    ) -> Vec<f64> {
        let mut g = vec![0.0; field.n_params()];
        let mut work = field.clone();
        for k in 0..field.n_params() {
            let p0 = field.params()[k];
            work.params_mut()[k] = p0 + h;
            let fp = loss(&work);
            work.params_mut()[k] = p0 - h;
            let fm = loss(&work);
            work.params_mut()[k] = p0;
            g[k] = (fp - fm) / (2.0 * h);
        }
        g
    }

    #[test]
    fn parameter_gradient_matches_fd_plain() {
        let field = init_field(2, 3, 6, 77).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(78);
        let z: Vec<f64> = (0..8).map(|_| rng.random::<f64>() - 0.5).collect();
        let sbar: Vec<f64> = (0..8).map(|_| rng.random::<f64>() - 0.5).collect();
        let tau = 0.37;
        let loss = |f: &VelocityField| -> f64 {
            let mut out = vec![0.0; 8];
            f.eval_batch(tau, &z, &mut out);
            out.iter().zip(&sbar).map(|(a, b)| a * b).sum()
        };
        let mut grad = FieldGradient::zeros_like(&field);
        let mut zbar = vec![0.0; 8];
        field.vjp_batch(tau, &z, &sbar, &mut zbar, &mut grad);
        let fd = fd_param_grad(&field, loss, 1e-6);
        for k in 0..field.n_params() {
            assert!(
                (grad.data[k] - fd[k]).abs() <= 1e-6 + 1e-4 * fd[k].abs(),
                "param {k}: {} vs {}",
                grad.data[k],
                fd[k]
            );
        }
        // input gradient against finite differences
        let loss_z = |zz: &[f64]| -> f64 {
            let mut out = vec![0.0; 8];
            field.eval_batch(tau, zz, &mut out);
            out.iter().zip(&sbar).map(|(a, b)| a * b).sum()
        };
        let mut zwork = z.clone();
        for k in 0..8 {
            let z0 = zwork[k];
            zwork[k] = z0 + 1e-6;
            let fp = loss_z(&zwork);
            zwork[k] = z0 - 1e-6;
            let fm = loss_z(&zwork);
            zwork[k] = z0;
            let fd = (fp - fm) / 2e-6;
            assert!((zbar[k] - fd).abs() <= 1e-6 + 1e-4 * fd.abs());
        }
    }

    #[test]
    fn parameter_gradient_matches_fd_with_jacobian_cotangent() {
        for &d in &[1usize, 2] {
            let field = init_field(d, 4, 6, 88 + d as u64).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(89);
            let n = 4;
            let z: Vec<f64> = (0..n * d).map(|_| rng.random::<f64>() - 0.5).collect();
            let sbar: Vec<f64> = (0..n * d).map(|_| rng.random::<f64>() - 0.5).collect();
            let jbar: Vec<f64> = (0..n * d * d).map(|_| rng.random::<f64>() - 0.5).collect();
            let tau = 0.81;
            let loss = |f: &VelocityField| -> f64 {
                let mut s = vec![0.0; n * d];
                let mut jac = vec![0.0; n * d * d];
                f.eval_jac_batch(tau, &z, &mut s, &mut jac);
                let a: f64 = s.iter().zip(&sbar).map(|(x, y)| x * y).sum();
                let b: f64 = jac.iter().zip(&jbar).map(|(x, y)| x * y).sum();
                a + b
            };
            let mut grad = FieldGradient::zeros_like(&field);
            let mut zbar = vec![0.0; n * d];
            field.vjp_jac_batch(tau, &z, &sbar, &jbar, &mut zbar, &mut grad);
            let fd = fd_param_grad(&field, loss, 1e-6);
            for k in 0..field.n_params() {
                assert!(
                    (grad.data[k] - fd[k]).abs() <= 1e-6 + 1e-4 * fd[k].abs(),
                    "d={d} param {k}: {} vs {}",
                    grad.data[k],
                    fd[k]
                );
            }
            // input gradient must include the Jacobian chain's v-dependence
            let loss_z = |zz: &[f64]| -> f64 {
                let mut s = vec![0.0; n * d];
                let mut jac = vec![0.0; n * d * d];
                field.eval_jac_batch(tau, zz, &mut s, &mut jac);
                let a: f64 = s.iter().zip(&sbar).map(|(x, y)| x * y).sum();
                let b: f64 = jac.iter().zip(&jbar).map(|(x, y)| x * y).sum();
                a + b
            };
            let mut zwork = z.clone();
            for k in 0..n * d {
                let z0 = zwork[k];
                zwork[k] = z0 + 1e-6;
                let fp = loss_z(&zwork);
                zwork[k] = z0 - 1e-6;
                let fm = loss_z(&zwork);
                zwork[k] = z0;
                let fdv = (fp - fm) / 2e-6;
                assert!(
                    (zbar[k] - fdv).abs() <= 1e-6 + 1e-4 * fdv.abs(),
                    "d={d} zbar {k}: {} vs {}",
                    zbar[k],
                    fdv
                );
            }
        }
    }

    #[test]
    fn checkpoint_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("field.ckpt");
        let f = init_field(3, 5, 32, 5).unwrap();
        f.save_checkpoint(&path).unwrap();
        let g = VelocityField::load_checkpoint(&path).unwrap();
        assert_eq!(f.params(), g.params());
        assert_eq!(g.d_v, 3);
    }

    #[test]
    fn linear_field_oracle() {
        let lf = LinearField {
            d_v: 2,
            coeff: 0.5,
            center: vec![1.0, 0.0],
        };
        let z = [3.0, 2.0];
        let mut s = [0.0; 2];
        lf.eval_batch(0.0, &z, &mut s);
        assert_eq!(s, [1.0, 1.0]);
        let mut jac = [0.0; 4];
        lf.eval_jac_batch(0.0, &z, &mut s, &mut jac);
        assert_eq!(jac, [0.5, 0.0, 0.0, 0.5]);
    }
}
