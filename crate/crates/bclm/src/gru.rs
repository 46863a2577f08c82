//! Baseline discriminator: a standard gated recurrent cell over token
//! embeddings with an affine map to one logit per step. Unlike the twin
//! heads it never sees backbone hidden states, so guiding decode with it
//! requires stepping the cell once per candidate token.

use crate::numerics::{add_scaled, dot, sigmoid, Matrix, Rng};

#[derive(Clone, Debug, PartialEq)]
pub struct GruBaseline {
    pub w_ir: Matrix, // d_h x d_e
    pub w_hr: Matrix, // d_h x d_h
    pub b_r: Vec<f64>,
    pub w_iz: Matrix,
    pub w_hz: Matrix,
    pub b_z: Vec<f64>,
    pub w_in: Matrix,
    pub w_hn: Matrix,
    pub b_in: Vec<f64>,
    pub b_hn: Vec<f64>,
    pub w_out: Vec<f64>,
    pub b_out: f64,
}

pub struct GruCache {
    pub h_prev: Vec<f64>,
    pub e: Vec<f64>,
    pub r: Vec<f64>,
    pub z: Vec<f64>,
    pub n: Vec<f64>,
    pub c_hn: Vec<f64>,
    pub h_new: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct GruGrads {
    pub w_ir: Matrix,
    pub w_hr: Matrix,
    pub b_r: Vec<f64>,
    pub w_iz: Matrix,
    pub w_hz: Matrix,
    pub b_z: Vec<f64>,
    pub w_in: Matrix,
    pub w_hn: Matrix,
    pub b_in: Vec<f64>,
    pub b_hn: Vec<f64>,
    pub w_out: Vec<f64>,
    pub b_out: f64,
}

impl GruBaseline {
    pub fn zeros(d_h: usize, d_e: usize) -> Self {
        GruBaseline {
            w_ir: Matrix::zeros(d_h, d_e),
            w_hr: Matrix::zeros(d_h, d_h),
            b_r: vec![0.0; d_h],
            w_iz: Matrix::zeros(d_h, d_e),
            w_hz: Matrix::zeros(d_h, d_h),
            b_z: vec![0.0; d_h],
            w_in: Matrix::zeros(d_h, d_e),
            w_hn: Matrix::zeros(d_h, d_h),
            b_in: vec![0.0; d_h],
            b_hn: vec![0.0; d_h],
            w_out: vec![0.0; d_h],
            b_out: 0.0,
        }
    }

    pub fn init(d_h: usize, d_e: usize, rng: &mut Rng) -> Self {
        let mut g = GruBaseline::zeros(d_h, d_e);
        for t in g.tensors_mut() {
            for v in t {
                *v = rng.uniform(-0.08, 0.08);
            }
        }
        g
    }

    pub fn d_h(&self) -> usize {
        self.w_hr.rows()
    }

    pub fn d_e(&self) -> usize {
        self.w_ir.cols()
    }

    pub fn init_hidden(&self) -> Vec<f64> {
        vec![0.0; self.d_h()]
    }

    /// Flat parameter views in canonical order; `b_out` is handled separately
    /// by the trainer because it is a scalar.
    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        vec![
            self.w_ir.as_mut_slice(),
            self.w_hr.as_mut_slice(),
            &mut self.b_r,
            self.w_iz.as_mut_slice(),
            self.w_hz.as_mut_slice(),
            &mut self.b_z,
            self.w_in.as_mut_slice(),
            self.w_hn.as_mut_slice(),
            &mut self.b_in,
            &mut self.b_hn,
            &mut self.w_out,
        ]
    }

    pub fn step(&self, h_prev: &[f64], e: &[f64]) -> GruCache {
        let r: Vec<f64> = {
            let c = self.w_hr.affine(&self.b_r, h_prev);
            self.w_ir
                .affine(&c, e)
                .into_iter()
                .map(sigmoid)
                .collect()
        };
        let z: Vec<f64> = {
            let c = self.w_hz.affine(&self.b_z, h_prev);
            self.w_iz
                .affine(&c, e)
                .into_iter()
                .map(sigmoid)
                .collect()
        };
        let c_hn = self.w_hn.affine(&self.b_hn, h_prev);
        let a = self.w_in.affine(&self.b_in, e);
        let n: Vec<f64> = (0..a.len()).map(|j| (a[j] + r[j] * c_hn[j]).tanh()).collect();
        let h_new: Vec<f64> = (0..n.len())
            .map(|j| (1.0 - z[j]) * n[j] + z[j] * h_prev[j])
            .collect();
        GruCache {
            h_prev: h_prev.to_vec(),
            e: e.to_vec(),
            r,
            z,
            n,
            c_hn,
            h_new,
        }
    }

    pub fn logit(&self, h: &[f64]) -> f64 {
        dot(&self.w_out, h) + self.b_out
    }

    /// Per-step logits over an embedded sequence, hidden state starting at
    /// zero.
    pub fn seq_logits(&self, embs: &[&[f64]]) -> Vec<f64> {
        assert!(!embs.is_empty(), "seq_logits: empty sequence");
        let mut h = self.init_hidden();
        let mut out = Vec::with_capacity(embs.len());
        for &e in embs {
            let cache = self.step(&h, e);
            h = cache.h_new;
            out.push(self.logit(&h));
        }
        out
    }

    /// Backward of one cell application. `d_h_new` is dL/dh_new; parameter
    /// gradients accumulate into `grads`, returns dL/dh_prev.
    pub fn backward_step(
        &self,
        cache: &GruCache,
        d_h_new: &[f64],
        grads: &mut GruGrads,
    ) -> Vec<f64> {
        let d_h = self.d_h();
        let mut d_h_prev = vec![0.0; d_h];

        let d_n: Vec<f64> = (0..d_h).map(|j| d_h_new[j] * (1.0 - cache.z[j])).collect();
        let d_z: Vec<f64> = (0..d_h)
            .map(|j| d_h_new[j] * (cache.h_prev[j] - cache.n[j]))
            .collect();
        for j in 0..d_h {
            d_h_prev[j] += d_h_new[j] * cache.z[j];
        }

        let d_npre: Vec<f64> = (0..d_h)
            .map(|j| d_n[j] * (1.0 - cache.n[j] * cache.n[j]))
            .collect();
        grads.w_in.add_outer(&d_npre, &cache.e, 1.0);
        add_scaled(&mut grads.b_in, &d_npre, 1.0);
        let d_r: Vec<f64> = (0..d_h).map(|j| d_npre[j] * cache.c_hn[j]).collect();
        let d_chn: Vec<f64> = (0..d_h).map(|j| d_npre[j] * cache.r[j]).collect();
        grads.w_hn.add_outer(&d_chn, &cache.h_prev, 1.0);
        add_scaled(&mut grads.b_hn, &d_chn, 1.0);
        add_scaled(&mut d_h_prev, &self.w_hn.t_matvec(&d_chn), 1.0);

        let d_sz: Vec<f64> = (0..d_h)
            .map(|j| d_z[j] * cache.z[j] * (1.0 - cache.z[j]))
            .collect();
        grads.w_iz.add_outer(&d_sz, &cache.e, 1.0);
        grads.w_hz.add_outer(&d_sz, &cache.h_prev, 1.0);
        add_scaled(&mut grads.b_z, &d_sz, 1.0);
        add_scaled(&mut d_h_prev, &self.w_hz.t_matvec(&d_sz), 1.0);

        let d_sr: Vec<f64> = (0..d_h)
            .map(|j| d_r[j] * cache.r[j] * (1.0 - cache.r[j]))
            .collect();
        grads.w_ir.add_outer(&d_sr, &cache.e, 1.0);
        grads.w_hr.add_outer(&d_sr, &cache.h_prev, 1.0);
        add_scaled(&mut grads.b_r, &d_sr, 1.0);
        add_scaled(&mut d_h_prev, &self.w_hr.t_matvec(&d_sr), 1.0);

        d_h_prev
    }

    /// BPTT over a full sequence given dL/dlogit per step.
    pub fn backward_sequence(&self, embs: &[&[f64]], d_logits: &[f64], grads: &mut GruGrads) {
        assert_eq!(embs.len(), d_logits.len());
        let mut h = self.init_hidden();
        let mut caches = Vec::with_capacity(embs.len());
        for &e in embs {
            let cache = self.step(&h, e);
            h = cache.h_new.clone();
            caches.push(cache);
        }
        let mut d_h_next = vec![0.0; self.d_h()];
        for i in (0..embs.len()).rev() {
            let dm = d_logits[i];
            add_scaled(&mut grads.w_out, &caches[i].h_new, dm);
            grads.b_out += dm;
            let mut d_h_new: Vec<f64> = self.w_out.iter().map(|&w| dm * w).collect();
            add_scaled(&mut d_h_new, &d_h_next, 1.0);
            d_h_next = self.backward_step(&caches[i], &d_h_new, grads);
        }
    }
}

impl GruGrads {
    pub fn zeros(d_h: usize, d_e: usize) -> Self {
        GruGrads {
            w_ir: Matrix::zeros(d_h, d_e),
            w_hr: Matrix::zeros(d_h, d_h),
            b_r: vec![0.0; d_h],
            w_iz: Matrix::zeros(d_h, d_e),
            w_hz: Matrix::zeros(d_h, d_h),
            b_z: vec![0.0; d_h],
            w_in: Matrix::zeros(d_h, d_e),
            w_hn: Matrix::zeros(d_h, d_h),
            b_in: vec![0.0; d_h],
            b_hn: vec![0.0; d_h],
            w_out: vec![0.0; d_h],
            b_out: 0.0,
        }
    }

    pub fn tensors(&self) -> Vec<&[f64]> {
        vec![
            self.w_ir.as_slice(),
            self.w_hr.as_slice(),
            &self.b_r,
            self.w_iz.as_slice(),
            self.w_hz.as_slice(),
            &self.b_z,
            self.w_in.as_slice(),
            self.w_hn.as_slice(),
            &self.b_in,
            &self.b_hn,
            &self.w_out,
        ]
    }
}

pub fn flatten(g: &GruBaseline) -> Vec<f64> {
    let mut out = Vec::new();
    let mut c = g.clone();
    for t in c.tensors_mut() {
        out.extend_from_slice(t);
    }
    out.push(g.b_out);
    out
}

pub fn load_flat(g: &mut GruBaseline, flat: &[f64]) {
    let mut at = 0;
    for t in g.tensors_mut() {
        t.copy_from_slice(&flat[at..at + t.len()]);
        at += t.len();
    }
    g.b_out = flat[at];
    assert_eq!(at + 1, flat.len());
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{finite_difference_gradient, max_relative_error};

    #[test]
    fn zero_weights_give_half_probs() {
        let g = GruBaseline::zeros(3, 2);
        let logits = g.seq_logits(&[&[0.5, -0.5], &[1.0, 1.0]]);
        assert!(logits.iter().all(|&m| m == 0.0));
        assert!(logits.iter().all(|&m| sigmoid(m) == 0.5));
    }

    #[test]
    fn single_step_equals_cell_once() {
        let mut rng = Rng::new(12, 0);
        let g = GruBaseline::init(4, 3, &mut rng);
        let e = [0.3, -0.4, 0.2];
        let cache = g.step(&g.init_hidden(), &e);
        let logits = g.seq_logits(&[&e]);
        assert_eq!(logits, vec![g.logit(&cache.h_new)]);
    }

    #[test]
    fn sequence_gradients_match_finite_differences() {
        let d_h = 3;
        let d_e = 2;
        for inst in 0..20u64 {
            let mut rng = Rng::new(900 + inst, 0);
            let mut g = GruBaseline::zeros(d_h, d_e);
            {
                let flat_len = flatten(&g).len();
                let flat: Vec<f64> = (0..flat_len).map(|_| rng.uniform(-0.7, 0.7)).collect();
                load_flat(&mut g, &flat);
            }
            let embs_store: Vec<Vec<f64>> = (0..4)
                .map(|_| (0..d_e).map(|_| rng.uniform(-1.0, 1.0)).collect())
                .collect();
            let embs: Vec<&[f64]> = embs_store.iter().map(|v| v.as_slice()).collect();
            let probe: Vec<f64> = (0..4).map(|_| rng.uniform(-1.0, 1.0)).collect();

            // L = probe . logits
            let mut grads = GruGrads::zeros(d_h, d_e);
            g.backward_sequence(&embs, &probe, &mut grads);
            let mut analytic = Vec::new();
            for t in grads.tensors() {
                analytic.extend_from_slice(t);
            }
            analytic.push(grads.b_out);

            let theta = flatten(&g);
            let oracle = finite_difference_gradient(
                |t| {
                    let mut q = g.clone();
                    load_flat(&mut q, t);
                    let logits = q.seq_logits(&embs);
                    logits.iter().zip(&probe).map(|(m, p)| m * p).sum()
                },
                &theta,
                1e-4,
            );
            let err = max_relative_error(&analytic, &oracle);
            assert!(err <= 1e-4, "instance {inst}: rel err {err}");
        }
    }
}
