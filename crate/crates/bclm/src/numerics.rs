//! Dense f64 kernels shared by every model in the crate: a row-major matrix
//! type with a pinned evaluation order, elementwise activations, a stable
//! log-softmax, a deterministic counter-based RNG, and the central-difference
//! gradient oracle the test suites check every analytic backward against.
//!
//! All reductions run left-to-right over ascending indices so that results
//! are bit-identical across runs and platforms.

/// Row-major dense matrix of f64 values. Dimensions are fixed at construction.
#[derive(Clone, Debug, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        assert!(rows > 0 && cols > 0, "matrix dims must be positive");
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "data length must equal rows*cols");
        Matrix { rows, cols, data }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        assert!(!rows.is_empty(), "matrix needs at least one row");
        let cols = rows[0].len();
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            assert_eq!(r.len(), cols, "ragged rows");
            data.extend_from_slice(r);
        }
        Matrix {
            rows: rows.len(),
            cols,
            data,
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// `y = W x + b`, each entry a left-to-right row dot product followed by
    /// the bias add. This order is part of the contract: batched paths that
    /// must agree bitwise with scalar paths reproduce it exactly.
    pub fn affine(&self, bias: &[f64], x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.cols, "affine: x dim mismatch");
        assert_eq!(bias.len(), self.rows, "affine: bias dim mismatch");
        let mut y = Vec::with_capacity(self.rows);
        for i in 0..self.rows {
            y.push(dot(self.row(i), x) + bias[i]);
        }
        y
    }

    /// `y = W x` without a bias term.
    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.cols, "matvec: x dim mismatch");
        (0..self.rows).map(|i| dot(self.row(i), x)).collect()
    }

    /// `y = W^T v`; used by every backward pass.
    pub fn t_matvec(&self, v: &[f64]) -> Vec<f64> {
        assert_eq!(v.len(), self.rows, "t_matvec: v dim mismatch");
        let mut y = vec![0.0; self.cols];
        for i in 0..self.rows {
            let row = self.row(i);
            let vi = v[i];
            for j in 0..self.cols {
                y[j] += vi * row[j];
            }
        }
        y
    }

    /// Accumulate the outer product `W += scale * (dy x^T)`.
    pub fn add_outer(&mut self, dy: &[f64], x: &[f64], scale: f64) {
        assert_eq!(dy.len(), self.rows, "add_outer: dy dim mismatch");
        assert_eq!(x.len(), self.cols, "add_outer: x dim mismatch");
        for i in 0..self.rows {
            let s = scale * dy[i];
            let row = self.row_mut(i);
            for j in 0..x.len() {
                row[j] += s * x[j];
            }
        }
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "dot: dim mismatch");
    let mut s = 0.0;
    for k in 0..a.len() {
        s += a[k] * b[k];
    }
    s
}

pub fn add_scaled(acc: &mut [f64], v: &[f64], scale: f64) {
    assert_eq!(acc.len(), v.len(), "add_scaled: dim mismatch");
    for (a, x) in acc.iter_mut().zip(v) {
        *a += scale * x;
    }
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn relu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        0.0
    }
}

/// `ln(1 + e^x)` computed without overflow; for x > 30 the result is x to
/// within f64 resolution so x is returned directly.
pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

/// `ln sigma(x) = -softplus(-x)`; stays finite for any finite logit, which the
/// sampler relies on when combining very confident head scores.
pub fn log_sigmoid(x: f64) -> f64 {
    -softplus(-x)
}

/// Max-subtracted log-softmax; `exp` of the output sums to one within 1e-12
/// even when the input contains components near ±1000.
pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    assert!(!logits.is_empty(), "log_softmax: empty input");
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for &v in logits {
        sum += (v - max).exp();
    }
    let log_z = sum.ln();
    logits.iter().map(|&v| v - max - log_z).collect()
}

/// Central-difference gradient oracle: `(f(x+eps e_j) - f(x-eps e_j)) / 2eps`
/// per coordinate. Panics if `f` returns a non-finite value near `theta`.
pub fn finite_difference_gradient<F: FnMut(&[f64]) -> f64>(
    mut f: F,
    theta: &[f64],
    eps: f64,
) -> Vec<f64> {
    assert!(eps > 0.0, "finite differences need eps > 0");
    let mut probe = theta.to_vec();
    let mut grad = Vec::with_capacity(theta.len());
    for j in 0..theta.len() {
        let orig = probe[j];
        probe[j] = orig + eps;
        let hi = f(&probe);
        probe[j] = orig - eps;
        let lo = f(&probe);
        probe[j] = orig;
        assert!(
            hi.is_finite() && lo.is_finite(),
            "finite_difference_gradient: f not finite near theta (coord {j})"
        );
        grad.push((hi - lo) / (2.0 * eps));
    }
    grad
}

/// Largest elementwise relative error between an analytic gradient and the
/// finite-difference oracle, with denominator `max(|g_fd|, 1e-8)`.
pub fn max_relative_error(analytic: &[f64], oracle: &[f64]) -> f64 {
    assert_eq!(analytic.len(), oracle.len());
    analytic
        .iter()
        .zip(oracle)
        .map(|(a, o)| (a - o).abs() / o.abs().max(1e-8))
        .fold(0.0, f64::max)
}

const GOLDEN_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;
const STREAM_SALT: u64 = 0x6A09_E667_F3BC_C909; // fractional bits of sqrt(2)

fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Deterministic splitmix64 generator. A `(seed, stream)` pair fully
/// determines the output sequence on every platform: the initial state is
/// `mix64(seed) ^ mix64(stream ^ STREAM_SALT)` and each draw advances the
/// state by the 64-bit golden gamma before finalizing with `mix64`. Distinct
/// stream indices give independent streams, which parallel work keys by task
/// index.
#[derive(Clone, Debug)]
pub struct Rng {
    state: u64,
}

impl Rng {
    pub fn new(seed: u64, stream: u64) -> Self {
        Rng {
            state: mix64(seed) ^ mix64(stream ^ STREAM_SALT),
        }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(GOLDEN_GAMMA);
        mix64(self.state)
    }

    /// Uniform draw in [0, 1) with 53 random mantissa bits.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_f64()
    }

    /// Uniform integer in [0, n). Modulo bias is far below anything the desk
    /// scale can observe and keeps the draw deterministic and branch-free.
    pub fn gen_range(&mut self, n: usize) -> usize {
        assert!(n > 0, "gen_range: empty range");
        (self.next_u64() % n as u64) as usize
    }

    /// Fisher-Yates shuffle driven by this generator.
    pub fn shuffle<T>(&mut self, xs: &mut [T]) {
        for i in (1..xs.len()).rev() {
            let j = self.gen_range(i + 1);
            xs.swap(i, j);
        }
    }

    /// Inverse-CDF categorical draw over ascending index order. Weights need
    /// not be normalized; exactly one uniform draw is consumed.
    pub fn categorical(&mut self, weights: &[f64]) -> usize {
        assert!(!weights.is_empty(), "categorical: empty support");
        let mut total = 0.0;
        for &w in weights {
            debug_assert!(w >= 0.0);
            total += w;
        }
        let u = self.next_f64() * total;
        let mut cum = 0.0;
        for (i, &w) in weights.iter().enumerate() {
            cum += w;
            if u < cum {
                return i;
            }
        }
        weights.len() - 1
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn affine_identity() {
        let w = Matrix::identity(2);
        let y = w.affine(&[0.0, 0.0], &[1.0, -2.0]);
        assert_eq!(y, vec![1.0, -2.0]);
    }

    #[test]
    fn affine_hand_case() {
        let w = Matrix::from_rows(&[vec![1.0, 1.0]]);
        let y = w.affine(&[0.5], &[2.0, 3.0]);
        assert_eq!(y, vec![5.5]);
    }

    #[test]
    fn affine_zero_weights() {
        let w = Matrix::zeros(1, 3);
        let y = w.affine(&[7.0], &[4.0, -5.0, 6.0]);
        assert_eq!(y, vec![7.0]);
    }

    #[test]
    #[should_panic(expected = "dim mismatch")]
    fn affine_dim_mismatch_panics() {
        let w = Matrix::zeros(2, 2);
        w.affine(&[0.0, 0.0], &[1.0]);
    }

    #[test]
    fn activation_values() {
        assert_eq!(sigmoid(0.0), 0.5);
        assert_eq!(relu(1.0), 1.0);
        assert_eq!(relu(-2.0), 0.0);
        assert!((softplus(0.0) - std::f64::consts::LN_2).abs() < 1e-15);
        assert_eq!(softplus(31.0), 31.0);
        assert!(log_sigmoid(-1000.0).is_finite());
    }

    #[test]
    fn log_softmax_uniform() {
        let out = log_softmax(&[0.0, 0.0]);
        let expect = (0.5f64).ln();
        assert!((out[0] - expect).abs() < 1e-15);
        assert!((out[1] - expect).abs() < 1e-15);
    }

    #[test]
    fn log_softmax_hand_case() {
        let out = log_softmax(&[(2.0f64).ln(), 0.0]);
        assert!((out[0] - (2.0f64 / 3.0).ln()).abs() < 1e-15);
        assert!((out[1] - (1.0f64 / 3.0).ln()).abs() < 1e-15);
    }

    #[test]
    fn log_softmax_extreme_is_stable() {
        // With a max component of 1000 the exact values are 0 and -1000 to
        // f64 resolution (the cross term e^-1000 underflows to zero).
        let out = log_softmax(&[1000.0, 0.0]);
        assert_eq!(out[0], 0.0);
        assert_eq!(out[1], -1000.0);
        let mass: f64 = out.iter().map(|v| v.exp()).sum();
        assert!((mass - 1.0).abs() < 1e-12);
    }

    #[test]
    fn finite_difference_quadratic() {
        let g = finite_difference_gradient(|t| t[0] * t[0], &[3.0], 1e-4);
        assert!((g[0] - 6.0).abs() < 1e-6);
    }

    #[test]
    fn finite_difference_constant() {
        let g = finite_difference_gradient(|_| 4.25, &[1.0, 2.0, 3.0], 1e-4);
        assert!(g.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn finite_difference_sigmoid() {
        let g = finite_difference_gradient(|t| sigmoid(t[0]), &[0.0], 1e-4);
        assert!((g[0] - 0.25).abs() < 1e-8);
    }

    #[test]
    fn rng_identical_streams_agree() {
        let mut a = Rng::new(42, 7);
        let mut b = Rng::new(42, 7);
        for _ in 0..10_000 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
    }

    #[test]
    fn rng_distinct_streams_differ() {
        let mut a = Rng::new(42, 0);
        let mut b = Rng::new(42, 1);
        let same = (0..64).filter(|_| a.next_u64() == b.next_u64()).count();
        assert_eq!(same, 0);
    }

    #[test]
    fn categorical_is_inverse_cdf() {
        let mut rng = Rng::new(1, 0);
        let mut counts = [0usize; 2];
        for _ in 0..10_000 {
            counts[rng.categorical(&[0.9, 0.1])] += 1;
        }
        let frac = counts[0] as f64 / 10_000.0;
        assert!((0.88..=0.92).contains(&frac), "frac={frac}");
    }
}
