//! The twin attribute discriminator heads.
//!
//! The normal head scores a prefix from the backbone hidden state:
//! `m_n(h) = W_0 relu(W_g h + b_g)`. The faster head scores a candidate
//! continuation token from the *previous* hidden state and the token's fixed
//! embedding through the gated unit: `m_f(h, e) = W_0 o` with `g = W_g h +
//! b_g` left unactivated, exactly as the architecture is written. `W_g`,
//! `b_g` and `W_0` are the same storage for both heads, so an update through
//! either path moves both.
//!
//! Scoring the whole vocabulary reuses the per-state gate context across all
//! candidate embeddings, and [`VocabScorer`] additionally precomputes the
//! embedding-side gate products `E W_1*^T` once per head so a decode step
//! costs one backbone forward plus cheap elementwise work per token. Both
//! paths produce bitwise identical scores to the scalar [`faster_logit`].

use crate::gated::{GatedCell, GatedCellGrads, GateContext};
use crate::numerics::{dot, log_sigmoid, relu, sigmoid, Matrix, Rng};

#[derive(Clone, Debug, PartialEq)]
pub struct DiscriminatorParams {
    pub attribute: String,
    /// Gate tensors; `cell.w_g` / `cell.b_g` are shared with the normal head.
    pub cell: GatedCell,
    /// Shared output row vector, length d_h.
    pub w_0: Vec<f64>,
}

/// Gradients for every discriminator tensor, shared ones included.
#[derive(Clone, Debug)]
pub struct DiscGrads {
    pub cell: GatedCellGrads,
    pub w_0: Vec<f64>,
}

impl DiscriminatorParams {
    /// Uniform(-0.08, 0.08) init of all tensors, drawn in canonical order.
    pub fn init(attribute: &str, d_h: usize, d_e: usize, rng: &mut Rng) -> Self {
        let cell = GatedCell::init(d_h, d_e, rng);
        let w_0 = (0..d_h).map(|_| rng.uniform(-0.08, 0.08)).collect();
        DiscriminatorParams {
            attribute: attribute.to_string(),
            cell,
            w_0,
        }
    }

    pub fn init_seeded(attribute: &str, d_h: usize, d_e: usize, seed: u64) -> Self {
        let mut rng = Rng::new(seed, 0);
        Self::init(attribute, d_h, d_e, &mut rng)
    }

    pub fn d_h(&self) -> usize {
        self.cell.d_h()
    }

    pub fn d_e(&self) -> usize {
        self.cell.d_e()
    }

    /// Parameter slices in canonical order (cell tensors, then w_0); aligned
    /// with [`DiscGrads::tensors`].
    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut ts = self.cell.tensors_mut();
        ts.push(&mut self.w_0);
        ts
    }
}

impl DiscGrads {
    pub fn zeros(d_h: usize, d_e: usize) -> Self {
        DiscGrads {
            cell: GatedCellGrads::zeros(d_h, d_e),
            w_0: vec![0.0; d_h],
        }
    }

    pub fn tensors(&self) -> Vec<&[f64]> {
        let mut ts = self.cell.tensors();
        ts.push(&self.w_0);
        ts
    }
}

/// Normal-head logit `W_0 relu(W_g h + b_g)`.
pub fn normal_logit(p: &DiscriminatorParams, h: &[f64]) -> f64 {
    let g: Vec<f64> = p
        .cell
        .w_g
        .affine(&p.cell.b_g, h)
        .into_iter()
        .map(relu)
        .collect();
    dot(&p.w_0, &g)
}

pub fn normal_prob(p: &DiscriminatorParams, h: &[f64]) -> f64 {
    sigmoid(normal_logit(p, h))
}

/// `ln sigma(m_n)`; never underflows to -inf for finite logits.
pub fn log_normal_prob(p: &DiscriminatorParams, h: &[f64]) -> f64 {
    log_sigmoid(normal_logit(p, h))
}

/// Gradients of `upstream * m_n(h)` for the shared tensors; returns dL/dh.
pub fn normal_backward(
    p: &DiscriminatorParams,
    h: &[f64],
    upstream: f64,
    grads: &mut DiscGrads,
) -> Vec<f64> {
    let a = p.cell.w_g.affine(&p.cell.b_g, h);
    let g: Vec<f64> = a.iter().map(|&v| relu(v)).collect();
    for j in 0..g.len() {
        grads.w_0[j] += upstream * g[j];
    }
    // relu subgradient at 0 is 0
    let d_a: Vec<f64> = (0..a.len())
        .map(|j| if a[j] > 0.0 { upstream * p.w_0[j] } else { 0.0 })
        .collect();
    grads.cell.w_g.add_outer(&d_a, h, 1.0);
    for j in 0..d_a.len() {
        grads.cell.b_g[j] += d_a[j];
    }
    p.cell.w_g.t_matvec(&d_a)
}

/// Faster-head logit for a single candidate embedding.
pub fn faster_logit(p: &DiscriminatorParams, h_prev: &[f64], e: &[f64]) -> f64 {
    let ctx = p.cell.context(h_prev);
    let cache = p.cell.forward_with_context(&ctx, h_prev, e);
    dot(&p.w_0, &cache.o)
}

pub fn faster_prob(p: &DiscriminatorParams, h_prev: &[f64], e: &[f64]) -> f64 {
    sigmoid(faster_logit(p, h_prev, e))
}

/// Faster-head logits for every vocabulary token, sharing the `g` context
/// across candidates. Entry `w` equals `faster_logit(p, h_prev, emb.row(w))`
/// exactly.
pub fn faster_logits_all(p: &DiscriminatorParams, h_prev: &[f64], emb: &Matrix) -> Vec<f64> {
    assert_eq!(emb.cols(), p.d_e(), "embedding width mismatch");
    let ctx = p.cell.context(h_prev);
    (0..emb.rows())
        .map(|w| {
            let cache = p.cell.forward_with_context(&ctx, h_prev, emb.row(w));
            dot(&p.w_0, &cache.o)
        })
        .collect()
}

/// Gradients of `upstream * m_f(h_prev, e)` for all tensors including the
/// shared ones; returns `(dL/dh_prev, dL/de)`.
pub fn faster_backward(
    p: &DiscriminatorParams,
    h_prev: &[f64],
    e: &[f64],
    upstream: f64,
    grads: &mut DiscGrads,
) -> (Vec<f64>, Vec<f64>) {
    let cache = p.cell.forward(h_prev, e);
    for j in 0..cache.o.len() {
        grads.w_0[j] += upstream * cache.o[j];
    }
    let d_o: Vec<f64> = p.w_0.iter().map(|&w| upstream * w).collect();
    p.cell.backward(&cache, &d_o, &mut grads.cell)
}

/// Precomputed embedding-side gate products for whole-vocabulary scoring.
/// The tables depend only on the head parameters and the frozen embedding
/// table, so a decoder builds one scorer per head and reuses it for every
/// step of every sample.
pub struct VocabScorer {
    /// Row w: `W_1r e_w` (d_h entries), etc.
    a_r: Matrix,
    a_z: Matrix,
    /// Includes the bias: row w is `W_1n e_w + b_1n`, matching the scalar
    /// path's `affine(b_1n, e)` evaluation order.
    a_n: Matrix,
}

impl VocabScorer {
    pub fn new(p: &DiscriminatorParams, emb: &Matrix) -> Self {
        assert_eq!(emb.cols(), p.d_e(), "embedding width mismatch");
        let v = emb.rows();
        let d_h = p.d_h();
        let mut a_r = Matrix::zeros(v, d_h);
        let mut a_z = Matrix::zeros(v, d_h);
        let mut a_n = Matrix::zeros(v, d_h);
        for w in 0..v {
            let e = emb.row(w);
            a_r.row_mut(w).copy_from_slice(&p.cell.w1r.matvec(e));
            a_z.row_mut(w).copy_from_slice(&p.cell.w1z.matvec(e));
            a_n.row_mut(w).copy_from_slice(&p.cell.w1n.affine(&p.cell.b_1n, e));
        }
        VocabScorer { a_r, a_z, a_n }
    }

    /// Logits for every token given the previous hidden state. Bitwise equal
    /// to [`faster_logits_all`]: each gate preactivation is the same
    /// two-operand sum `dot(W_1*, e_w) + c_*[j]` in the same order.
    pub fn scores(&self, p: &DiscriminatorParams, h_prev: &[f64]) -> Vec<f64> {
        let ctx: GateContext = p.cell.context(h_prev);
        let d_h = p.d_h();
        let mut out = Vec::with_capacity(self.a_r.rows());
        for w in 0..self.a_r.rows() {
            let ar = self.a_r.row(w);
            let az = self.a_z.row(w);
            let an = self.a_n.row(w);
            let mut logit = 0.0;
            for j in 0..d_h {
                let r = sigmoid(ar[j] + ctx.c_r[j]);
                let z = sigmoid(az[j] + ctx.c_z[j]);
                let n = (an[j] + r * ctx.c_n2[j]).tanh();
                let o = relu((1.0 - z) * n + z * ctx.g[j]);
                logit += p.w_0[j] * o;
            }
            out.push(logit);
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gated::{flatten, flatten_grads, load_flat};
    use crate::numerics::{finite_difference_gradient, max_relative_error};

    fn random_params(d_h: usize, d_e: usize, seed: u64) -> DiscriminatorParams {
        let mut rng = Rng::new(seed, 0);
        let mut p = DiscriminatorParams::init("test", d_h, d_e, &mut rng);
        for t in p.tensors_mut() {
            for v in t {
                *v = rng.uniform(-0.8, 0.8);
            }
        }
        p
    }

    fn random_vec(n: usize, rng: &mut Rng) -> Vec<f64> {
        (0..n).map(|_| rng.uniform(-1.0, 1.0)).collect()
    }

    #[test]
    fn normal_logit_hand_case() {
        let mut p = DiscriminatorParams {
            attribute: "a".into(),
            cell: GatedCell::zeros(2, 2),
            w_0: vec![1.0, 1.0],
        };
        p.cell.w_g = Matrix::identity(2);
        // g = relu([1, -2]) = [1, 0]
        assert_eq!(normal_logit(&p, &[1.0, -2.0]), 1.0);
        assert!((normal_prob(&p, &[1.0, -2.0]) - 0.7310585786300049).abs() < 1e-12);
    }

    #[test]
    fn normal_logit_zero_cases() {
        let p = DiscriminatorParams {
            attribute: "a".into(),
            cell: GatedCell::zeros(2, 2),
            w_0: vec![0.0, 0.0],
        };
        assert_eq!(normal_logit(&p, &[0.0, 0.0]), 0.0);
        assert_eq!(normal_prob(&p, &[0.0, 0.0]), 0.5);
    }

    #[test]
    fn log_prob_does_not_underflow() {
        let mut p = DiscriminatorParams {
            attribute: "a".into(),
            cell: GatedCell::zeros(1, 1),
            w_0: vec![-1000.0],
        };
        p.cell.w_g = Matrix::from_rows(&[vec![1.0]]);
        // logit = -1000; sigma underflows but the log-space accessor is finite
        let lp = log_normal_prob(&p, &[1.0]);
        assert!(lp.is_finite());
        assert!((lp + 1000.0).abs() < 1e-9);
    }

    #[test]
    fn faster_logit_hand_case() {
        // d_h = d_e = 1, only w_g = 1 and w_0 = 1 nonzero:
        // g = 1, r = z = 1/2, n = 0, o = relu(0.5*0 + 0.5*1) = 0.5.
        let mut p = DiscriminatorParams {
            attribute: "a".into(),
            cell: GatedCell::zeros(1, 1),
            w_0: vec![1.0],
        };
        p.cell.w_g = Matrix::from_rows(&[vec![1.0]]);
        assert_eq!(faster_logit(&p, &[1.0], &[123.0]), 0.5);
        // and the zero case
        let z = DiscriminatorParams {
            attribute: "a".into(),
            cell: GatedCell::zeros(1, 1),
            w_0: vec![1.0],
        };
        assert_eq!(faster_logit(&z, &[0.0], &[0.3]), 0.0);
    }

    #[test]
    fn batched_scoring_is_exact() {
        let p = random_params(6, 4, 31);
        let mut rng = Rng::new(32, 0);
        let mut emb = Matrix::zeros(64, 4);
        for x in emb.as_mut_slice() {
            *x = rng.uniform(-1.0, 1.0);
        }
        let h = random_vec(6, &mut rng);
        let batched = faster_logits_all(&p, &h, &emb);
        let scorer = VocabScorer::new(&p, &emb);
        let precomputed = scorer.scores(&p, &h);
        for w in 0..64 {
            let scalar = faster_logit(&p, &h, emb.row(w));
            assert_eq!(batched[w], scalar, "token {w}: batched != scalar");
            assert_eq!(precomputed[w], scalar, "token {w}: scorer != scalar");
        }
    }

    #[test]
    fn all_zero_params_score_every_token_equally() {
        let p = DiscriminatorParams {
            attribute: "a".into(),
            cell: GatedCell::zeros(3, 2),
            w_0: vec![0.0; 3],
        };
        let emb = Matrix::from_rows(&[vec![1.0, 2.0], vec![-1.0, 0.5], vec![0.0, 0.0]]);
        let scores = faster_logits_all(&p, &[0.4, -0.2, 0.1], &emb);
        assert!(scores.iter().all(|&s| s == scores[0]));
    }

    #[test]
    fn sigma_preserves_score_ordering() {
        let p = random_params(5, 3, 77);
        let mut rng = Rng::new(78, 0);
        let mut emb = Matrix::zeros(16, 3);
        for x in emb.as_mut_slice() {
            *x = rng.uniform(-1.0, 1.0);
        }
        let h = random_vec(5, &mut rng);
        let logits = faster_logits_all(&p, &h, &emb);
        let probs: Vec<f64> = logits.iter().map(|&m| sigmoid(m)).collect();
        let mut by_logit: Vec<usize> = (0..16).collect();
        let mut by_prob: Vec<usize> = (0..16).collect();
        by_logit.sort_by(|&a, &b| logits[b].partial_cmp(&logits[a]).unwrap().then(a.cmp(&b)));
        by_prob.sort_by(|&a, &b| probs[b].partial_cmp(&probs[a]).unwrap().then(a.cmp(&b)));
        assert_eq!(by_logit, by_prob);
    }

    #[test]
    fn zero_upstream_gives_zero_grads() {
        let p = random_params(4, 3, 90);
        let mut grads = DiscGrads::zeros(4, 3);
        normal_backward(&p, &[0.1, 0.2, -0.3, 0.4], 0.0, &mut grads);
        faster_backward(&p, &[0.1, 0.2, -0.3, 0.4], &[0.5, -0.5, 0.2], 0.0, &mut grads);
        for t in grads.tensors() {
            assert!(t.iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn faster_w0_grad_equals_o_in_hand_case() {
        let mut p = DiscriminatorParams {
            attribute: "a".into(),
            cell: GatedCell::zeros(1, 1),
            w_0: vec![1.0],
        };
        p.cell.w_g = Matrix::from_rows(&[vec![1.0]]);
        let mut grads = DiscGrads::zeros(1, 1);
        faster_backward(&p, &[1.0], &[0.0], 1.0, &mut grads);
        assert_eq!(grads.w_0, vec![0.5]);
    }

    fn flatten_params(p: &DiscriminatorParams) -> Vec<f64> {
        let mut v = flatten(&p.cell);
        v.extend_from_slice(&p.w_0);
        v
    }

    fn load_params(p: &mut DiscriminatorParams, flat: &[f64]) {
        let n = flat.len() - p.w_0.len();
        load_flat(&mut p.cell, &flat[..n]);
        p.w_0.copy_from_slice(&flat[n..]);
    }

    #[test]
    fn normal_backward_matches_finite_differences() {
        let d_h = 5;
        let d_e = 3;
        let mut checked = 0;
        let mut inst = 0u64;
        while checked < 20 {
            inst += 1;
            let p = random_params(d_h, d_e, 500 + inst);
            let mut rng = Rng::new(600 + inst, 0);
            let h = random_vec(d_h, &mut rng);
            // stay away from the relu kink
            let a = p.cell.w_g.affine(&p.cell.b_g, &h);
            if a.iter().any(|&v| v.abs() < 1e-3) {
                continue;
            }
            checked += 1;
            let upstream = rng.uniform(0.2, 1.5);

            let mut grads = DiscGrads::zeros(d_h, d_e);
            let d_h_grad = normal_backward(&p, &h, upstream, &mut grads);
            let mut analytic = flatten_grads(&grads.cell);
            analytic.extend_from_slice(&grads.w_0);
            analytic.extend_from_slice(&d_h_grad);

            let mut theta = flatten_params(&p);
            theta.extend_from_slice(&h);
            let n_params = flatten_params(&p).len();
            let oracle = finite_difference_gradient(
                |t| {
                    let mut q = p.clone();
                    load_params(&mut q, &t[..n_params]);
                    upstream * normal_logit(&q, &t[n_params..])
                },
                &theta,
                1e-4,
            );
            let err = max_relative_error(&analytic, &oracle);
            assert!(err <= 1e-4, "instance {inst}: rel err {err}");
        }
    }

    #[test]
    fn faster_backward_matches_finite_differences() {
        let d_h = 4;
        let d_e = 3;
        let mut checked = 0;
        let mut inst = 0u64;
        while checked < 20 {
            inst += 1;
            let p = random_params(d_h, d_e, 700 + inst);
            let mut rng = Rng::new(800 + inst, 0);
            let h = random_vec(d_h, &mut rng);
            let e = random_vec(d_e, &mut rng);
            let cache = p.cell.forward(&h, &e);
            if cache.u.iter().any(|&v| v.abs() < 1e-3) {
                continue;
            }
            checked += 1;
            let upstream = rng.uniform(0.2, 1.5);

            let mut grads = DiscGrads::zeros(d_h, d_e);
            let (d_h_grad, d_e_grad) = faster_backward(&p, &h, &e, upstream, &mut grads);
            let mut analytic = flatten_grads(&grads.cell);
            analytic.extend_from_slice(&grads.w_0);
            analytic.extend_from_slice(&d_h_grad);
            analytic.extend_from_slice(&d_e_grad);

            let mut theta = flatten_params(&p);
            theta.extend_from_slice(&h);
            theta.extend_from_slice(&e);
            let n_params = flatten_params(&p).len();
            let oracle = finite_difference_gradient(
                |t| {
                    let mut q = p.clone();
                    load_params(&mut q, &t[..n_params]);
                    let hh = &t[n_params..n_params + d_h];
                    let ee = &t[n_params + d_h..];
                    upstream * faster_logit(&q, hh, ee)
                },
                &theta,
                1e-4,
            );
            let err = max_relative_error(&analytic, &oracle);
            assert!(err <= 1e-4, "instance {inst}: rel err {err}");
        }
    }
}
