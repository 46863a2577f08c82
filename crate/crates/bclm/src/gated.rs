//! The gated unit shared by the faster discriminator head and the reference
//! backbone cell. Given a previous hidden state `h` and an input embedding
//! `e` it computes
//!
//! ```text
//! g = W_g h + b_g                      (no activation)
//! r = sigma(W_1r e + W_2r g + b_r)
//! z = sigma(W_1z e + W_2z g + b_z)
//! n = tanh(W_1n e + b_1n + r * (W_2n g + b_2n))
//! o = relu((1 - z) * n + z * g)
//! ```
//!
//! where `*` is elementwise. The backward pass is hand-derived; the ReLU
//! subgradient at zero is taken as zero.
//!
//! The g-dependent gate biases `c_r = W_2r g + b_r`, `c_z`, `c_n2` are
//! computed once per hidden state and reused for every candidate embedding,
//! so scoring the whole vocabulary shares the `g` work. Both the one-shot and
//! the shared-context paths evaluate each gate as `affine(W_1*, c_*, e)`,
//! which makes them bitwise identical.

use crate::numerics::{add_scaled, relu, sigmoid, Matrix, Rng};

#[derive(Clone, Debug, PartialEq)]
pub struct GatedCell {
    pub w_g: Matrix, // d_h x d_h
    pub b_g: Vec<f64>,
    pub w1r: Matrix, // d_h x d_e
    pub w2r: Matrix, // d_h x d_h
    pub b_r: Vec<f64>,
    pub w1z: Matrix,
    pub w2z: Matrix,
    pub b_z: Vec<f64>,
    pub w1n: Matrix,
    pub w2n: Matrix,
    pub b_1n: Vec<f64>,
    pub b_2n: Vec<f64>,
}

/// Per-state context shared across all candidate embeddings.
pub struct GateContext {
    pub g: Vec<f64>,
    pub c_r: Vec<f64>,
    pub c_z: Vec<f64>,
    pub c_n2: Vec<f64>,
}

/// Everything the backward pass needs from one forward evaluation.
pub struct CellCache {
    pub h_prev: Vec<f64>,
    pub e: Vec<f64>,
    pub g: Vec<f64>,
    pub c_n2: Vec<f64>,
    pub r: Vec<f64>,
    pub z: Vec<f64>,
    pub n: Vec<f64>,
    pub u: Vec<f64>,
    pub o: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct GatedCellGrads {
    pub w_g: Matrix,
    pub b_g: Vec<f64>,
    pub w1r: Matrix,
    pub w2r: Matrix,
    pub b_r: Vec<f64>,
    pub w1z: Matrix,
    pub w2z: Matrix,
    pub b_z: Vec<f64>,
    pub w1n: Matrix,
    pub w2n: Matrix,
    pub b_1n: Vec<f64>,
    pub b_2n: Vec<f64>,
}

impl GatedCell {
    pub fn zeros(d_h: usize, d_e: usize) -> Self {
        GatedCell {
            w_g: Matrix::zeros(d_h, d_h),
            b_g: vec![0.0; d_h],
            w1r: Matrix::zeros(d_h, d_e),
            w2r: Matrix::zeros(d_h, d_h),
            b_r: vec![0.0; d_h],
            w1z: Matrix::zeros(d_h, d_e),
            w2z: Matrix::zeros(d_h, d_h),
            b_z: vec![0.0; d_h],
            w1n: Matrix::zeros(d_h, d_e),
            w2n: Matrix::zeros(d_h, d_h),
            b_1n: vec![0.0; d_h],
            b_2n: vec![0.0; d_h],
        }
    }

    /// Uniform(-0.08, 0.08) init, tensors filled in struct order.
    pub fn init(d_h: usize, d_e: usize, rng: &mut Rng) -> Self {
        let mut cell = GatedCell::zeros(d_h, d_e);
        for t in cell.tensors_mut() {
            for v in t {
                *v = rng.uniform(-0.08, 0.08);
            }
        }
        cell
    }

    pub fn d_h(&self) -> usize {
        self.w_g.rows()
    }

    pub fn d_e(&self) -> usize {
        self.w1r.cols()
    }

    /// Flat views over all tensors in a fixed canonical order, used by the
    /// optimizer and the gradient checks. Must stay in sync with
    /// `GatedCellGrads::tensors`.
    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        vec![
            self.w_g.as_mut_slice(),
            &mut self.b_g,
            self.w1r.as_mut_slice(),
            self.w2r.as_mut_slice(),
            &mut self.b_r,
            self.w1z.as_mut_slice(),
            self.w2z.as_mut_slice(),
            &mut self.b_z,
            self.w1n.as_mut_slice(),
            self.w2n.as_mut_slice(),
            &mut self.b_1n,
            &mut self.b_2n,
        ]
    }

    pub fn context(&self, h_prev: &[f64]) -> GateContext {
        let g = self.w_g.affine(&self.b_g, h_prev);
        let c_r = self.w2r.affine(&self.b_r, &g);
        let c_z = self.w2z.affine(&self.b_z, &g);
        let c_n2 = self.w2n.affine(&self.b_2n, &g);
        GateContext { g, c_r, c_z, c_n2 }
    }

    /// Forward for one embedding given a shared context.
    pub fn forward_with_context(&self, ctx: &GateContext, h_prev: &[f64], e: &[f64]) -> CellCache {
        let r: Vec<f64> = self
            .w1r
            .affine(&ctx.c_r, e)
            .into_iter()
            .map(sigmoid)
            .collect();
        let z: Vec<f64> = self
            .w1z
            .affine(&ctx.c_z, e)
            .into_iter()
            .map(sigmoid)
            .collect();
        let a = self.w1n.affine(&self.b_1n, e);
        let n: Vec<f64> = (0..a.len())
            .map(|j| (a[j] + r[j] * ctx.c_n2[j]).tanh())
            .collect();
        let u: Vec<f64> = (0..n.len())
            .map(|j| (1.0 - z[j]) * n[j] + z[j] * ctx.g[j])
            .collect();
        let o: Vec<f64> = u.iter().map(|&v| relu(v)).collect();
        CellCache {
            h_prev: h_prev.to_vec(),
            e: e.to_vec(),
            g: ctx.g.clone(),
            c_n2: ctx.c_n2.clone(),
            r,
            z,
            n,
            u,
            o,
        }
    }

    pub fn forward(&self, h_prev: &[f64], e: &[f64]) -> CellCache {
        let ctx = self.context(h_prev);
        self.forward_with_context(&ctx, h_prev, e)
    }

    /// Chain-rule backward. `d_o` is dL/do; parameter gradients accumulate
    /// into `grads` and the returned pair is `(dL/dh_prev, dL/de)`.
    pub fn backward(
        &self,
        cache: &CellCache,
        d_o: &[f64],
        grads: &mut GatedCellGrads,
    ) -> (Vec<f64>, Vec<f64>) {
        let d_h = self.d_h();
        let mut d_g = vec![0.0; d_h];
        let mut d_e = vec![0.0; self.d_e()];

        // o = relu(u); u = (1-z) n + z g
        let d_u: Vec<f64> = (0..d_h)
            .map(|j| if cache.u[j] > 0.0 { d_o[j] } else { 0.0 })
            .collect();
        let d_n: Vec<f64> = (0..d_h).map(|j| d_u[j] * (1.0 - cache.z[j])).collect();
        let d_z: Vec<f64> = (0..d_h)
            .map(|j| d_u[j] * (cache.g[j] - cache.n[j]))
            .collect();
        for j in 0..d_h {
            d_g[j] += d_u[j] * cache.z[j];
        }

        // n = tanh(a + r * c_n2)
        let d_npre: Vec<f64> = (0..d_h)
            .map(|j| d_n[j] * (1.0 - cache.n[j] * cache.n[j]))
            .collect();
        grads.w1n.add_outer(&d_npre, &cache.e, 1.0);
        add_scaled(&mut grads.b_1n, &d_npre, 1.0);
        add_scaled(&mut d_e, &self.w1n.t_matvec(&d_npre), 1.0);
        let d_r: Vec<f64> = (0..d_h).map(|j| d_npre[j] * cache.c_n2[j]).collect();
        let d_cn2: Vec<f64> = (0..d_h).map(|j| d_npre[j] * cache.r[j]).collect();
        grads.w2n.add_outer(&d_cn2, &cache.g, 1.0);
        add_scaled(&mut grads.b_2n, &d_cn2, 1.0);
        add_scaled(&mut d_g, &self.w2n.t_matvec(&d_cn2), 1.0);

        // z = sigma(W_1z e + W_2z g + b_z)
        let d_sz: Vec<f64> = (0..d_h)
            .map(|j| d_z[j] * cache.z[j] * (1.0 - cache.z[j]))
            .collect();
        grads.w1z.add_outer(&d_sz, &cache.e, 1.0);
        grads.w2z.add_outer(&d_sz, &cache.g, 1.0);
        add_scaled(&mut grads.b_z, &d_sz, 1.0);
        add_scaled(&mut d_e, &self.w1z.t_matvec(&d_sz), 1.0);
        add_scaled(&mut d_g, &self.w2z.t_matvec(&d_sz), 1.0);

        // r = sigma(W_1r e + W_2r g + b_r)
        let d_sr: Vec<f64> = (0..d_h)
            .map(|j| d_r[j] * cache.r[j] * (1.0 - cache.r[j]))
            .collect();
        grads.w1r.add_outer(&d_sr, &cache.e, 1.0);
        grads.w2r.add_outer(&d_sr, &cache.g, 1.0);
        add_scaled(&mut grads.b_r, &d_sr, 1.0);
        add_scaled(&mut d_e, &self.w1r.t_matvec(&d_sr), 1.0);
        add_scaled(&mut d_g, &self.w2r.t_matvec(&d_sr), 1.0);

        // g = W_g h_prev + b_g
        grads.w_g.add_outer(&d_g, &cache.h_prev, 1.0);
        add_scaled(&mut grads.b_g, &d_g, 1.0);
        let d_h_prev = self.w_g.t_matvec(&d_g);

        (d_h_prev, d_e)
    }
}

impl GatedCellGrads {
    pub fn zeros(d_h: usize, d_e: usize) -> Self {
        GatedCellGrads {
            w_g: Matrix::zeros(d_h, d_h),
            b_g: vec![0.0; d_h],
            w1r: Matrix::zeros(d_h, d_e),
            w2r: Matrix::zeros(d_h, d_h),
            b_r: vec![0.0; d_h],
            w1z: Matrix::zeros(d_h, d_e),
            w2z: Matrix::zeros(d_h, d_h),
            b_z: vec![0.0; d_h],
            w1n: Matrix::zeros(d_h, d_e),
            w2n: Matrix::zeros(d_h, d_h),
            b_1n: vec![0.0; d_h],
            b_2n: vec![0.0; d_h],
        }
    }

    pub fn tensors(&self) -> Vec<&[f64]> {
        vec![
            self.w_g.as_slice(),
            &self.b_g,
            self.w1r.as_slice(),
            self.w2r.as_slice(),
            &self.b_r,
            self.w1z.as_slice(),
            self.w2z.as_slice(),
            &self.b_z,
            self.w1n.as_slice(),
            self.w2n.as_slice(),
            &self.b_1n,
            &self.b_2n,
        ]
    }

    pub fn scale(&mut self, s: f64) {
        for t in self.tensors_mut_internal() {
            for v in t {
                *v *= s;
            }
        }
    }

    fn tensors_mut_internal(&mut self) -> Vec<&mut [f64]> {
        vec![
            self.w_g.as_mut_slice(),
            &mut self.b_g,
            self.w1r.as_mut_slice(),
            self.w2r.as_mut_slice(),
            &mut self.b_r,
            self.w1z.as_mut_slice(),
            self.w2z.as_mut_slice(),
            &mut self.b_z,
            self.w1n.as_mut_slice(),
            self.w2n.as_mut_slice(),
            &mut self.b_1n,
            &mut self.b_2n,
        ]
    }
}

/// Flatten the cell parameters in canonical order; inverse of `load_flat`.
/// Test plumbing for the finite-difference checks.
pub fn flatten(cell: &GatedCell) -> Vec<f64> {
    let mut out = Vec::new();
    let mut c = cell.clone();
    for t in c.tensors_mut() {
        out.extend_from_slice(t);
    }
    out
}

pub fn load_flat(cell: &mut GatedCell, flat: &[f64]) {
    let mut at = 0;
    for t in cell.tensors_mut() {
        t.copy_from_slice(&flat[at..at + t.len()]);
        at += t.len();
    }
    assert_eq!(at, flat.len(), "flat vector length mismatch");
}

pub fn flatten_grads(grads: &GatedCellGrads) -> Vec<f64> {
    let mut out = Vec::new();
    for t in grads.tensors() {
        out.extend_from_slice(t);
    }
    out
}
