//! The trainable velocity field s_theta(tau, v): a fixed-topology MLP with
//! SiLU activations, its exact velocity Jacobian via layer-wise forward
//! chains, and hand-derived reverse passes for parameter gradients. The
//! reverse pass with a Jacobian cotangent differentiates through the chain
//! that produced the Jacobian itself (reverse over forward).

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
struct LayerShape {
    w_off: usize,
    b_off: usize,
    rows: usize,
    cols: usize,
}

/// Fixed-topology multilayer perceptron mapping (tau, v) in R^(d_v+1) to
/// a velocity in R^(d_v). Parameters are stored flat in checkpoint order
/// W_1, b_1, ..., W_L, b_L, row-major.
#[derive(Debug, Clone)]
pub struct VelocityField {
    pub d_v: usize,
    pub layers: usize,
    pub width: usize,
    params: Vec<f64>,
    shapes: Vec<LayerShape>,
}

/// Per-parameter accumulator mirroring a field's flat layout.
#[derive(Debug, Clone)]
pub struct FieldGradient {
    pub data: Vec<f64>,
}

impl FieldGradient {
    pub fn zeros_like(field: &VelocityField) -> Self {
        FieldGradient {
            data: vec![0.0; field.params.len()],
        }
    }

    pub fn fill_zero(&mut self) {
        self.data.fill(0.0);
    }

    pub fn add_assign(&mut self, other: &FieldGradient) {
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale(&mut self, s: f64) {
        for a in self.data.iter_mut() {
            *a *= s;
        }
    }
}

fn layer_shapes(d_v: usize, layers: usize, width: usize) -> Vec<LayerShape> {
    let mut shapes = Vec::with_capacity(layers);
    let mut off = 0;
    for l in 0..layers {
        let (rows, cols) = if l == 0 {
            (width, d_v + 1)
        } else if l == layers - 1 {
            (d_v, width)
        } else {
            (width, width)
        };
        let w_off = off;
        off += rows * cols;
        let b_off = off;
        off += rows;
        shapes.push(LayerShape {
            w_off,
            b_off,
            rows,
            cols,
        });
    }
    shapes
}

#[inline]
fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// SiLU and its first two derivatives at z.
#[inline]
fn silu_d2(z: f64) -> (f64, f64, f64) {
    let s = sigmoid(z);
    let sp = s * (1.0 - s);
    (z * s, s + z * sp, sp * (2.0 + z * (1.0 - 2.0 * s)))
}

/// Work buffers for one forward/reverse evaluation. Reused across particles
/// within a thread to avoid per-call allocation.
#[derive(Debug, Clone)]
pub struct MlpScratch {
    x: Vec<f64>,
    /// Pre-activations per hidden layer.
    a: Vec<Vec<f64>>,
    /// Activations per hidden layer.
    h: Vec<Vec<f64>>,
    /// d a / d v chains, m x d_v row-major per hidden layer.
    ja: Vec<Vec<f64>>,
    /// d h / d v chains.
    jh: Vec<Vec<f64>>,
    hbar: Vec<f64>,
    abar: Vec<f64>,
    hbar_prev: Vec<f64>,
    pbar: Vec<f64>,
    abar_j: Vec<f64>,
    pbar_prev: Vec<f64>,
}

impl MlpScratch {
    pub fn new(field: &VelocityField) -> Self {
        let m = field.width;
        let d = field.d_v;
        let hidden = field.layers - 1;
        MlpScratch {
            x: vec![0.0; d + 1],
            a: vec![vec![0.0; m]; hidden],
            h: vec![vec![0.0; m]; hidden],
            ja: vec![vec![0.0; m * d]; hidden],
            jh: vec![vec![0.0; m * d]; hidden],
            hbar: vec![0.0; m],
            abar: vec![0.0; m],
            hbar_prev: vec![0.0; m.max(d + 1)],
            pbar: vec![0.0; m * d],
            abar_j: vec![0.0; m * d],
            pbar_prev: vec![0.0; m.max(d + 1) * d],
        }
    }
}

impl VelocityField {
    /// Zero-initialized field (evaluates to zero everywhere).
    pub fn zeros(d_v: usize, layers: usize, width: usize) -> Self {
        let shapes = layer_shapes(d_v, layers, width);
        let n = shapes.last().map(|s| s.b_off + s.rows).unwrap_or(0);
        VelocityField {
            d_v,
            layers,
            width,
            params: vec![0.0; n],
            shapes,
        }
    }

    /// Biases zero; weights from a normal with variance 1/fan_in truncated at
    /// two standard deviations. Deterministic per seed.
    pub fn init(d_v: usize, layers: usize, width: usize, seed: u64) -> Result<Self> {
        if layers < 2 || width < 1 {
            return Err(Error::InvalidSpec(format!(
                "field needs layers >= 2 and width >= 1, got L={layers}, m={width}"
            )));
        }
        let mut field = Self::zeros(d_v, layers, width);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for l in 0..layers {
            let sh = field.shapes[l];
            let sd = (1.0 / sh.cols as f64).sqrt();
            for k in 0..sh.rows * sh.cols {
                let z = loop {
                    let n: f64 = rng.sample(StandardNormal);
                    if n.abs() <= 2.0 {
                        break n;
                    }
                };
                field.params[sh.w_off + k] = sd * z;
            }
        }
        Ok(field)
    }

    pub fn n_params(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    /// Round every parameter through f32 storage.
    pub fn quantize_f32(&mut self) {
        for p in self.params.iter_mut() {
            *p = *p as f32 as f64;
        }
    }

    fn weight(&self, l: usize) -> (&[f64], &[f64], usize, usize) {
        let sh = self.shapes[l];
        (
            &self.params[sh.w_off..sh.w_off + sh.rows * sh.cols],
            &self.params[sh.b_off..sh.b_off + sh.rows],
            sh.rows,
            sh.cols,
        )
    }

    /// Forward pass; activations are retained in `scratch` for a later
    /// reverse pass.
    pub fn forward(&self, tau: f64, v: &[f64], scratch: &mut MlpScratch, out: &mut [f64]) {
        let d = self.d_v;
        debug_assert_eq!(v.len(), d);
        scratch.x[0] = tau;
        scratch.x[1..=d].copy_from_slice(v);
        let hidden = self.layers - 1;
        for l in 0..hidden {
            let (w, b, rows, cols) = self.weight(l);
            for r in 0..rows {
                let mut acc = b[r];
                let wrow = &w[r * cols..(r + 1) * cols];
                if l == 0 {
                    for c in 0..cols {
                        acc += wrow[c] * scratch.x[c];
                    }
                } else {
                    let input = &scratch.h[l - 1];
                    for c in 0..cols {
                        acc += wrow[c] * input[c];
                    }
                }
                scratch.a[l][r] = acc;
            }
            for r in 0..rows {
                let z = scratch.a[l][r];
                scratch.h[l][r] = z * sigmoid(z);
            }
        }
        let (w, b, rows, cols) = self.weight(self.layers - 1);
        let input = &scratch.h[hidden - 1];
        for r in 0..rows {
            let mut acc = b[r];
            let wrow = &w[r * cols..(r + 1) * cols];
            for c in 0..cols {
                acc += wrow[c] * input[c];
            }
            out[r] = acc;
        }
    }

    /// Forward pass carrying the velocity Jacobian chains. Writes the field
    /// value to `out` and the exact d s / d v (row-major d_v x d_v) to `jac`.
    pub fn forward_jac(
        &self,
        tau: f64,
        v: &[f64],
        scratch: &mut MlpScratch,
        out: &mut [f64],
        jac: &mut [f64],
    ) {
        let d = self.d_v;
        scratch.x[0] = tau;
        scratch.x[1..=d].copy_from_slice(v);
        let hidden = self.layers - 1;
        for l in 0..hidden {
            let (w, b, rows, cols) = self.weight(l);
            for r in 0..rows {
                let wrow = &w[r * cols..(r + 1) * cols];
                let mut acc = b[r];
                if l == 0 {
                    for c in 0..cols {
                        acc += wrow[c] * scratch.x[c];
                    }
                    // d a / d v = W[:, 1..]
                    for bb in 0..d {
                        scratch.ja[l][r * d + bb] = wrow[bb + 1];
                    }
                } else {
                    let input = &scratch.h[l - 1];
                    for c in 0..cols {
                        acc += wrow[c] * input[c];
                    }
                    let jin = &scratch.jh[l - 1];
                    for bb in 0..d {
                        let mut jacc = 0.0;
                        for c in 0..cols {
                            jacc += wrow[c] * jin[c * d + bb];
                        }
                        scratch.ja[l][r * d + bb] = jacc;
                    }
                }
                scratch.a[l][r] = acc;
            }
            for r in 0..rows {
                let z = scratch.a[l][r];
                let s = sigmoid(z);
                let sp = s * (1.0 - s);
                scratch.h[l][r] = z * s;
                let d1 = s + z * sp;
                for bb in 0..d {
                    scratch.jh[l][r * d + bb] = d1 * scratch.ja[l][r * d + bb];
                }
            }
        }
        let (w, b, rows, cols) = self.weight(self.layers - 1);
        let input = &scratch.h[hidden - 1];
        let jin = &scratch.jh[hidden - 1];
        for r in 0..rows {
            let wrow = &w[r * cols..(r + 1) * cols];
            let mut acc = b[r];
            for c in 0..cols {
                acc += wrow[c] * input[c];
            }
            out[r] = acc;
            for bb in 0..d {
                let mut jacc = 0.0;
                for c in 0..cols {
                    jacc += wrow[c] * jin[c * d + bb];
                }
                jac[r * d + bb] = jacc;
            }
        }
    }

    /// Reverse pass for a forward() evaluation: accumulates the parameter
    /// gradient of sbar . s into `grad` and the input-velocity gradient
    /// (J^T sbar) into `vbar`.
    pub fn vjp(
        &self,
        scratch: &mut MlpScratch,
        sbar: &[f64],
        grad: &mut FieldGradient,
        vbar: &mut [f64],
    ) {
        let d = self.d_v;
        let hidden = self.layers - 1;
        {
            let sh = self.shapes[self.layers - 1];
            let (w, _, rows, cols) = self.weight(self.layers - 1);
            let input = &scratch.h[hidden - 1];
            for c in 0..cols {
                let mut acc = 0.0;
                for r in 0..rows {
                    acc += w[r * cols + c] * sbar[r];
                }
                scratch.hbar[c] = acc;
            }
            let layer = &mut grad.data[sh.w_off..sh.b_off + rows];
            let (gw, gb) = layer.split_at_mut(rows * cols);
            for r in 0..rows {
                for c in 0..cols {
                    gw[r * cols + c] += sbar[r] * input[c];
                }
                gb[r] += sbar[r];
            }
        }
        for l in (0..hidden).rev() {
            let sh = self.shapes[l];
            let (w, _, rows, cols) = self.weight(l);
            for r in 0..rows {
                let z = scratch.a[l][r];
                let s = sigmoid(z);
                let d1 = s + z * s * (1.0 - s);
                scratch.abar[r] = d1 * scratch.hbar[r];
            }
            {
                let layer = &mut grad.data[sh.w_off..sh.b_off + rows];
                let (gw, gb) = layer.split_at_mut(rows * cols);
                if l == 0 {
                    for r in 0..rows {
                        let ab = scratch.abar[r];
                        for c in 0..cols {
                            gw[r * cols + c] += ab * scratch.x[c];
                        }
                        gb[r] += ab;
                    }
                } else {
                    let input = &scratch.h[l - 1];
                    for r in 0..rows {
                        let ab = scratch.abar[r];
                        for c in 0..cols {
                            gw[r * cols + c] += ab * input[c];
                        }
                        gb[r] += ab;
                    }
                }
            }
            for c in 0..cols {
                let mut acc = 0.0;
                for r in 0..rows {
                    acc += w[r * cols + c] * scratch.abar[r];
                }
                scratch.hbar_prev[c] = acc;
            }
            if l == 0 {
                for bb in 0..d {
                    vbar[bb] += scratch.hbar_prev[bb + 1];
                }
            } else {
                let (front, _) = scratch.hbar_prev.split_at(cols);
                scratch.hbar[..cols].copy_from_slice(front);
            }
        }
    }

    /// Reverse pass for a forward_jac() evaluation with cotangents on both the
    /// output (`sbar`) and the velocity Jacobian (`jbar`, row-major d x d).
    /// Accumulates parameter gradients into `grad` and the full input gradient
    /// (including the Jacobian chain's dependence on v) into `vbar`.
    pub fn vjp_with_jac(
        &self,
        scratch: &mut MlpScratch,
        sbar: &[f64],
        jbar: &[f64],
        grad: &mut FieldGradient,
        vbar: &mut [f64],
    ) {
        let d = self.d_v;
        let hidden = self.layers - 1;
        {
            let sh = self.shapes[self.layers - 1];
            let (w, _, rows, cols) = self.weight(self.layers - 1);
            let input = &scratch.h[hidden - 1];
            let jin = &scratch.jh[hidden - 1];
            // hbar = W^T sbar ; pbar = W^T jbar
            for c in 0..cols {
                let mut acc = 0.0;
                for r in 0..rows {
                    acc += w[r * cols + c] * sbar[r];
                }
                scratch.hbar[c] = acc;
                for bb in 0..d {
                    let mut jacc = 0.0;
                    for r in 0..rows {
                        jacc += w[r * cols + c] * jbar[r * d + bb];
                    }
                    scratch.pbar[c * d + bb] = jacc;
                }
            }
            let layer = &mut grad.data[sh.w_off..sh.b_off + rows];
            let (gw, gb) = layer.split_at_mut(rows * cols);
            for r in 0..rows {
                for c in 0..cols {
                    let mut acc = sbar[r] * input[c];
                    for bb in 0..d {
                        acc += jbar[r * d + bb] * jin[c * d + bb];
                    }
                    gw[r * cols + c] += acc;
                }
                gb[r] += sbar[r];
            }
        }
        for l in (0..hidden).rev() {
            let sh = self.shapes[l];
            let (w, _, rows, cols) = self.weight(l);
            for r in 0..rows {
                let (_, d1, d2) = silu_d2(scratch.a[l][r]);
                // abar from the activation chain and from the Jacobian chain
                // (sigma'' couples P-bar with the stored A chain)
                let mut acc = d1 * scratch.hbar[r];
                let mut rowdot = 0.0;
                for bb in 0..d {
                    let pb = scratch.pbar[r * d + bb];
                    rowdot += pb * scratch.ja[l][r * d + bb];
                    scratch.abar_j[r * d + bb] = d1 * pb;
                }
                acc += d2 * rowdot;
                scratch.abar[r] = acc;
            }
            {
                let layer = &mut grad.data[sh.w_off..sh.b_off + rows];
                let (gw, gb) = layer.split_at_mut(rows * cols);
                if l == 0 {
                    for r in 0..rows {
                        let ab = scratch.abar[r];
                        for c in 0..cols {
                            gw[r * cols + c] += ab * scratch.x[c];
                        }
                        // A^1 = W[:, 1..]: chain contributes to the v-columns
                        for bb in 0..d {
                            gw[r * cols + bb + 1] += scratch.abar_j[r * d + bb];
                        }
                        gb[r] += ab;
                    }
                } else {
                    let input = &scratch.h[l - 1];
                    let jin = &scratch.jh[l - 1];
                    for r in 0..rows {
                        let ab = scratch.abar[r];
                        for c in 0..cols {
                            let mut acc = ab * input[c];
                            for bb in 0..d {
                                acc += scratch.abar_j[r * d + bb] * jin[c * d + bb];
                            }
                            gw[r * cols + c] += acc;
                        }
                        gb[r] += ab;
                    }
                }
            }
            for c in 0..cols {
                let mut acc = 0.0;
                for r in 0..rows {
                    acc += w[r * cols + c] * scratch.abar[r];
                }
                scratch.hbar_prev[c] = acc;
                for bb in 0..d {
                    let mut jacc = 0.0;
                    for r in 0..rows {
                        jacc += w[r * cols + c] * scratch.abar_j[r * d + bb];
                    }
                    scratch.pbar_prev[c * d + bb] = jacc;
                }
            }
            if l == 0 {
                for bb in 0..d {
                    vbar[bb] += scratch.hbar_prev[bb + 1];
                }
            } else {
                let (front, _) = scratch.hbar_prev.split_at(cols);
                scratch.hbar[..cols].copy_from_slice(front);
                let (pfront, _) = scratch.pbar_prev.split_at(cols * d);
                scratch.pbar[..cols * d].copy_from_slice(pfront);
            }
        }
    }
}
