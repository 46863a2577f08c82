//! The frozen autoregressive language model that supplies hidden states,
//! next-token distributions, and the fixed embedding table. The reference
//! implementation is a single gated recurrent cell over trainable embeddings
//! with an affine head to vocabulary logits, trained by next-token
//! cross-entropy with plain SGD. Once trained it is never mutated; every
//! consumer treats it as read-only.
//!
//! Sequences are consumed with `<bos>` prepended, so `h_1` is the state after
//! the first real token and the state returned by [`Backbone::init_state`]
//! already reflects the `<bos>`-only prefix (also called `h_0` elsewhere in
//! the crate).

use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};
use crate::gated::{GatedCell, GatedCellGrads};
use crate::numerics::{add_scaled, log_softmax, Matrix, Rng};

pub type TokenId = usize;

pub const BOS: TokenId = 0;
pub const EOS: TokenId = 1;
pub const BOS_TOKEN: &str = "<bos>";
pub const EOS_TOKEN: &str = "<eos>";

/// Closed ordered token set. Ids are indices; `<bos>` and `<eos>` are pinned
/// to ids 0 and 1.
#[derive(Clone, Debug, PartialEq)]
pub struct Vocabulary {
    tokens: Vec<String>,
}

impl Vocabulary {
    pub fn new(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < 3 {
            return Err(Error::BadConfig(
                "vocabulary needs <bos>, <eos> and at least one real token".into(),
            ));
        }
        if tokens[BOS] != BOS_TOKEN || tokens[EOS] != EOS_TOKEN {
            return Err(Error::BadConfig(format!(
                "vocabulary must start with {BOS_TOKEN} and {EOS_TOKEN}"
            )));
        }
        let mut seen = std::collections::HashSet::new();
        for t in &tokens {
            if t.is_empty() || t.contains(char::is_whitespace) {
                return Err(Error::BadConfig(format!(
                    "token {t:?} is empty or contains whitespace"
                )));
            }
            if !seen.insert(t.clone()) {
                return Err(Error::BadConfig(format!("duplicate token {t:?}")));
            }
        }
        Ok(Vocabulary { tokens })
    }

    /// Synthetic vocabulary `<bos> <eos> w02 w03 ...` of the given total size.
    pub fn synthetic(size: usize) -> Result<Self> {
        if size < 3 {
            return Err(Error::BadConfig("vocab size must be at least 3".into()));
        }
        let mut tokens = vec![BOS_TOKEN.to_string(), EOS_TOKEN.to_string()];
        for i in 2..size {
            tokens.push(format!("w{i:02}"));
        }
        Vocabulary::new(tokens)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn token(&self, id: TokenId) -> &str {
        &self.tokens[id]
    }

    pub fn id(&self, token: &str) -> Option<TokenId> {
        self.tokens.iter().position(|t| t == token)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Map whitespace-separated text to ids, failing on unknown tokens.
    pub fn encode(&self, text: &str) -> Result<Vec<TokenId>> {
        text.split_whitespace()
            .map(|t| self.id(t).ok_or_else(|| Error::UnknownToken(t.to_string())))
            .collect()
    }

    pub fn decode(&self, ids: &[TokenId]) -> String {
        ids.iter()
            .map(|&i| self.token(i))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

/// Value-semantic recurrent state; cloning forks a decoding branch.
#[derive(Clone, Debug, PartialEq)]
pub struct BackboneState {
    pub h: Vec<f64>,
    pub prefix_len: usize,
}

#[derive(Debug)]
pub struct Backbone {
    vocab: Vocabulary,
    d_h: usize,
    d_e: usize,
    emb: Matrix,  // |V| x d_e
    cell: GatedCell,
    w_out: Matrix, // |V| x d_h
    b_out: Vec<f64>,
    forwards: AtomicU64,
}

impl Backbone {
    pub fn new(
        vocab: Vocabulary,
        emb: Matrix,
        cell: GatedCell,
        w_out: Matrix,
        b_out: Vec<f64>,
    ) -> Result<Self> {
        let v = vocab.len();
        let d_h = cell.d_h();
        let d_e = cell.d_e();
        if emb.rows() != v || emb.cols() != d_e {
            return Err(Error::BadCheckpoint(format!(
                "embedding table is {}x{}, expected {v}x{d_e}",
                emb.rows(),
                emb.cols()
            )));
        }
        if w_out.rows() != v || w_out.cols() != d_h || b_out.len() != v {
            return Err(Error::BadCheckpoint(
                "output head dims inconsistent with vocab/hidden sizes".into(),
            ));
        }
        Ok(Backbone {
            vocab,
            d_h,
            d_e,
            emb,
            cell,
            w_out,
            b_out,
            forwards: AtomicU64::new(0),
        })
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    pub fn d_h(&self) -> usize {
        self.d_h
    }

    pub fn d_e(&self) -> usize {
        self.d_e
    }

    pub fn embedding_table(&self) -> &Matrix {
        &self.emb
    }

    pub fn cell(&self) -> &GatedCell {
        &self.cell
    }

    pub fn output_head(&self) -> (&Matrix, &[f64]) {
        (&self.w_out, &self.b_out)
    }

    /// Fixed embedding row of a token.
    pub fn embed(&self, t: TokenId) -> &[f64] {
        assert!(t < self.vocab.len(), "token id {t} out of range");
        self.emb.row(t)
    }

    /// Number of cell applications since construction. One step = one
    /// forward; this is the quantity the efficiency claims count.
    pub fn forward_count(&self) -> u64 {
        self.forwards.load(Ordering::Relaxed)
    }

    /// State for the `<bos>`-only prefix (one cell application).
    pub fn init_state(&self) -> BackboneState {
        let cache = self.cell.forward(&vec![0.0; self.d_h], self.embed(BOS));
        self.forwards.fetch_add(1, Ordering::Relaxed);
        BackboneState {
            h: cache.o,
            prefix_len: 1,
        }
    }

    /// Next-token log-probabilities at a state, without advancing it.
    pub fn logprobs(&self, state: &BackboneState) -> Vec<f64> {
        log_softmax(&self.w_out.affine(&self.b_out, &state.h))
    }

    /// Consume one token: returns the new state, the hidden state after the
    /// token, and normalized next-token log-probabilities.
    pub fn step(&self, state: &BackboneState, t: TokenId) -> (BackboneState, Vec<f64>, Vec<f64>) {
        assert!(t < self.vocab.len(), "token id {t} out of range");
        let cache = self.cell.forward(&state.h, self.embed(t));
        self.forwards.fetch_add(1, Ordering::Relaxed);
        let next = BackboneState {
            h: cache.o,
            prefix_len: state.prefix_len + 1,
        };
        let lp = self.logprobs(&next);
        let h = next.h.clone();
        (next, h, lp)
    }

    /// Batch convenience over `step`: per position the hidden state `h_i`
    /// and the next-token log-probabilities after consuming `x_i`.
    pub fn full_hidden_states(&self, xs: &[TokenId]) -> Vec<(Vec<f64>, Vec<f64>)> {
        assert!(!xs.is_empty(), "full_hidden_states: empty sequence");
        let mut out = Vec::with_capacity(xs.len());
        let mut state = self.init_state();
        for &t in xs {
            let (next, h, lp) = self.step(&state, t);
            out.push((h, lp));
            state = next;
        }
        out
    }

    /// `exp(mean_i -log p(x_i | x_{<i}))` with `<bos>` supplying the first
    /// context; `<eos>` is not scored.
    pub fn perplexity(&self, xs: &[TokenId]) -> f64 {
        assert!(!xs.is_empty(), "perplexity: empty sequence");
        let mut state = self.init_state();
        let mut nll = 0.0;
        for &t in xs {
            let lp = self.logprobs(&state);
            nll -= lp[t];
            let (next, _, _) = self.step(&state, t);
            state = next;
        }
        (nll / xs.len() as f64).exp()
    }
}

#[derive(Clone, Debug)]
pub struct BackboneTrainConfig {
    pub d_h: usize,
    pub d_e: usize,
    pub epochs: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for BackboneTrainConfig {
    fn default() -> Self {
        BackboneTrainConfig {
            d_h: 32,
            d_e: 16,
            epochs: 40,
            lr: 0.15,
            seed: 0,
        }
    }
}

/// Per-epoch mean next-token NLL, for convergence checks and logging.
#[derive(Clone, Debug)]
pub struct BackboneTrainReport {
    pub epoch_nll: Vec<f64>,
}

struct BackboneGrads {
    emb: Matrix,
    cell: GatedCellGrads,
    w_out: Matrix,
    b_out: Vec<f64>,
}

/// Train the reference backbone with SGD on next-token cross-entropy.
/// Each sequence is wrapped as `<bos> x_1..x_T <eos>`; gradients flow through
/// the full unrolled recurrence. Deterministic for a given seed; the returned
/// model is treated as frozen from here on.
pub fn train_backbone(
    vocab: Vocabulary,
    sequences: &[Vec<TokenId>],
    cfg: &BackboneTrainConfig,
) -> Result<(Backbone, BackboneTrainReport)> {
    if sequences.is_empty() {
        return Err(Error::BadConfig("training corpus is empty".into()));
    }
    if cfg.d_h == 0 || cfg.d_e == 0 {
        return Err(Error::BadConfig("model dims must be positive".into()));
    }
    for (i, s) in sequences.iter().enumerate() {
        if let Some(&t) = s.iter().find(|&&t| t >= vocab.len()) {
            return Err(Error::BadConfig(format!(
                "sequence {i} contains out-of-range token id {t}"
            )));
        }
    }

    let v = vocab.len();
    let mut init_rng = Rng::new(cfg.seed, 0);
    let mut emb = Matrix::zeros(v, cfg.d_e);
    for x in emb.as_mut_slice() {
        *x = init_rng.uniform(-0.08, 0.08);
    }
    let cell = GatedCell::init(cfg.d_h, cfg.d_e, &mut init_rng);
    let mut w_out = Matrix::zeros(v, cfg.d_h);
    for x in w_out.as_mut_slice() {
        *x = init_rng.uniform(-0.08, 0.08);
    }
    let b_out = vec![0.0; v];

    let mut model = Backbone::new(vocab, emb, cell, w_out, b_out)?;

    let mut shuffle_rng = Rng::new(cfg.seed, 1);
    let mut order: Vec<usize> = (0..sequences.len()).collect();
    let mut epoch_nll = Vec::with_capacity(cfg.epochs);

    for _ in 0..cfg.epochs {
        shuffle_rng.shuffle(&mut order);
        let mut epoch_loss = 0.0;
        for &idx in &order {
            let seq = &sequences[idx];
            let loss = sgd_sequence_update(&mut model, seq, cfg.lr);
            epoch_loss += loss;
        }
        epoch_nll.push(epoch_loss / sequences.len() as f64);
    }

    Ok((model, BackboneTrainReport { epoch_nll }))
}

/// One forward/backward/update on a single sequence. Returns the mean NLL.
fn sgd_sequence_update(model: &mut Backbone, seq: &[TokenId], lr: f64) -> f64 {
    let mut toks = Vec::with_capacity(seq.len() + 2);
    toks.push(BOS);
    toks.extend_from_slice(seq);
    toks.push(EOS);
    let n_targets = toks.len() - 1;
    let scale = 1.0 / n_targets as f64;

    // Forward, caching each cell application.
    let mut caches = Vec::with_capacity(n_targets);
    let mut h = vec![0.0; model.d_h];
    let mut loss = 0.0;
    let mut dlogits_all = Vec::with_capacity(n_targets);
    for i in 0..n_targets {
        let cache = model.cell.forward(&h, model.emb.row(toks[i]));
        h = cache.o.clone();
        let lp = log_softmax(&model.w_out.affine(&model.b_out, &h));
        let target = toks[i + 1];
        loss -= lp[target];
        // d(mean NLL)/dlogits = scale * (softmax - onehot)
        let mut dl: Vec<f64> = lp.iter().map(|&x| scale * x.exp()).collect();
        dl[target] -= scale;
        dlogits_all.push(dl);
        caches.push(cache);
    }
    loss *= scale;

    // Backward through time.
    let mut grads = BackboneGrads {
        emb: Matrix::zeros(model.emb.rows(), model.emb.cols()),
        cell: GatedCellGrads::zeros(model.d_h, model.d_e),
        w_out: Matrix::zeros(model.w_out.rows(), model.w_out.cols()),
        b_out: vec![0.0; model.b_out.len()],
    };
    let mut d_h_next = vec![0.0; model.d_h];
    for i in (0..n_targets).rev() {
        let dl = &dlogits_all[i];
        grads.w_out.add_outer(dl, &caches[i].o, 1.0);
        add_scaled(&mut grads.b_out, dl, 1.0);
        let mut d_o = model.w_out.t_matvec(dl);
        add_scaled(&mut d_o, &d_h_next, 1.0);
        let (d_h_prev, d_e) = model.cell.backward(&caches[i], &d_o, &mut grads.cell);
        add_scaled(grads.emb.row_mut(toks[i]), &d_e, 1.0);
        d_h_next = d_h_prev;
    }

    // SGD update.
    add_scaled(model.emb.as_mut_slice(), grads.emb.as_slice(), -lr);
    for (p, g) in model
        .cell
        .tensors_mut()
        .into_iter()
        .zip(grads.cell.tensors())
    {
        add_scaled(p, g, -lr);
    }
    add_scaled(model.w_out.as_mut_slice(), grads.w_out.as_slice(), -lr);
    add_scaled(&mut model.b_out, &grads.b_out, -lr);

    loss
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{dot, finite_difference_gradient, max_relative_error};

    fn tiny_vocab() -> Vocabulary {
        Vocabulary::synthetic(4).unwrap()
    }

    fn zero_backbone(v: usize, d_h: usize, d_e: usize) -> Backbone {
        let vocab = Vocabulary::synthetic(v).unwrap();
        Backbone::new(
            vocab,
            Matrix::zeros(v, d_e),
            GatedCell::zeros(d_h, d_e),
            Matrix::zeros(v, d_h),
            vec![0.0; v],
        )
        .unwrap()
    }

    #[test]
    fn vocab_reserves_bos_eos() {
        let v = tiny_vocab();
        assert_eq!(v.token(BOS), "<bos>");
        assert_eq!(v.token(EOS), "<eos>");
        assert_eq!(v.id("w02"), Some(2));
        assert!(v.id("nope").is_none());
    }

    #[test]
    fn vocab_rejects_duplicates() {
        let r = Vocabulary::new(vec![
            "<bos>".into(),
            "<eos>".into(),
            "a".into(),
            "a".into(),
        ]);
        assert!(r.is_err());
    }

    #[test]
    fn init_state_is_deterministic() {
        let m = zero_backbone(4, 3, 2);
        let a = m.init_state();
        let b = m.init_state();
        assert_eq!(a, b);
        assert_eq!(a.prefix_len, 1);
    }

    #[test]
    fn zero_backbone_is_uniform() {
        let m = zero_backbone(4, 3, 2);
        let s = m.init_state();
        let (_, _, lp) = m.step(&s, 2);
        let expect = -(4.0f64).ln();
        for v in lp {
            assert!((v - expect).abs() < 1e-15);
        }
    }

    #[test]
    fn uniform_model_perplexity_is_vocab_size() {
        let m = zero_backbone(4, 3, 2);
        let p = m.perplexity(&[2, 3, 2]);
        assert!((p - 4.0).abs() < 1e-12);
    }

    #[test]
    fn stepwise_matches_batch_exactly() {
        let mut rng = Rng::new(5, 0);
        let vocab = Vocabulary::synthetic(6).unwrap();
        let mut emb = Matrix::zeros(6, 3);
        for x in emb.as_mut_slice() {
            *x = rng.uniform(-0.5, 0.5);
        }
        let cell = GatedCell::init(4, 3, &mut rng);
        let mut w_out = Matrix::zeros(6, 4);
        for x in w_out.as_mut_slice() {
            *x = rng.uniform(-0.5, 0.5);
        }
        let m = Backbone::new(vocab, emb, cell, w_out, vec![0.0; 6]).unwrap();

        for _ in 0..100 {
            let len = 1 + rng.gen_range(8);
            let xs: Vec<TokenId> = (0..len).map(|_| rng.gen_range(6)).collect();
            let batch = m.full_hidden_states(&xs);
            let mut state = m.init_state();
            for (i, &t) in xs.iter().enumerate() {
                let (next, h, lp) = m.step(&state, t);
                assert_eq!(h, batch[i].0);
                assert_eq!(lp, batch[i].1);
                state = next;
            }
        }
    }

    #[test]
    fn forward_counter_counts_cell_applications() {
        let m = zero_backbone(4, 3, 2);
        let before = m.forward_count();
        let s = m.init_state();
        let (s, _, _) = m.step(&s, 2);
        let _ = m.step(&s, 3);
        assert_eq!(m.forward_count() - before, 3);
    }

    #[test]
    fn train_lr_zero_keeps_init() {
        let vocab = tiny_vocab();
        let cfg = BackboneTrainConfig {
            d_h: 3,
            d_e: 2,
            epochs: 1,
            lr: 0.0,
            seed: 9,
        };
        let (a, _) = train_backbone(vocab.clone(), &[vec![2, 3]], &cfg).unwrap();
        let cfg0 = BackboneTrainConfig {
            epochs: 0,
            ..cfg.clone()
        };
        let (b, _) = train_backbone(vocab, &[vec![2, 3]], &cfg0).unwrap();
        assert_eq!(a.emb, b.emb);
        assert_eq!(a.cell, b.cell);
        assert_eq!(a.w_out, b.w_out);
        assert_eq!(a.b_out, b.b_out);
    }

    #[test]
    fn train_same_seed_is_bit_identical() {
        let vocab = Vocabulary::synthetic(8).unwrap();
        let mut rng = Rng::new(3, 0);
        let corpus: Vec<Vec<TokenId>> = (0..20)
            .map(|_| (0..6).map(|_| 2 + rng.gen_range(6)).collect())
            .collect();
        let cfg = BackboneTrainConfig {
            d_h: 6,
            d_e: 4,
            epochs: 3,
            lr: 0.05,
            seed: 11,
        };
        let (a, _) = train_backbone(vocab.clone(), &corpus, &cfg).unwrap();
        let (b, _) = train_backbone(vocab, &corpus, &cfg).unwrap();
        assert_eq!(a.emb, b.emb);
        assert_eq!(a.cell, b.cell);
        assert_eq!(a.w_out, b.w_out);
        assert_eq!(a.b_out, b.b_out);
    }

    #[test]
    fn training_reduces_loss_on_markov_corpus() {
        // Two-state synthetic Markov chain over tokens {2,3}: strong
        // self-transition, so the recurrent model can beat the unigram rate.
        let vocab = tiny_vocab();
        let mut rng = Rng::new(17, 0);
        let mut corpus = Vec::new();
        for _ in 0..40 {
            let mut s = 2 + rng.gen_range(2);
            let mut seq = vec![s];
            for _ in 0..11 {
                if rng.next_f64() < 0.9 {
                    // stay
                } else {
                    s = if s == 2 { 3 } else { 2 };
                }
                seq.push(s);
            }
            corpus.push(seq);
        }
        let cfg = BackboneTrainConfig {
            d_h: 8,
            d_e: 4,
            epochs: 50,
            lr: 0.1,
            seed: 1,
        };
        let (_, report) = train_backbone(vocab, &corpus, &cfg).unwrap();
        let first = report.epoch_nll[0];
        let last = *report.epoch_nll.last().unwrap();
        assert!(
            last < first,
            "loss did not decrease: {first} -> {last}"
        );
    }

    #[test]
    fn sequence_gradient_matches_finite_differences() {
        // Full-sequence NLL gradient through the unrolled cell (BPTT),
        // checked against central differences over all cell parameters.
        for inst in 0..20u64 {
            let vocab = tiny_vocab();
            let mut rng = Rng::new(400 + inst, 0);
            let d_h = 3;
            let d_e = 2;
            let mut emb = Matrix::zeros(4, d_e);
            for x in emb.as_mut_slice() {
                *x = rng.uniform(-0.6, 0.6);
            }
            let mut cell = GatedCell::zeros(d_h, d_e);
            for t in cell.tensors_mut() {
                for v in t {
                    *v = rng.uniform(-0.6, 0.6);
                }
            }
            let mut w_out = Matrix::zeros(4, d_h);
            for x in w_out.as_mut_slice() {
                *x = rng.uniform(-0.6, 0.6);
            }
            let seq = vec![2, 3, 3, 2];

            let loss_for = |cell: &GatedCell| -> f64 {
                let toks = {
                    let mut t = vec![BOS];
                    t.extend_from_slice(&seq);
                    t.push(EOS);
                    t
                };
                let mut h = vec![0.0; d_h];
                let mut loss = 0.0;
                for i in 0..toks.len() - 1 {
                    let cache = cell.forward(&h, emb.row(toks[i]));
                    h = cache.o;
                    let lp = log_softmax(&w_out.affine(&vec![0.0; 4], &h));
                    loss -= lp[toks[i + 1]];
                }
                loss / (toks.len() - 1) as f64
            };

            // Skip instances whose ReLU pre-activations sit near the kink.
            let kink_ok = {
                let toks = {
                    let mut t = vec![BOS];
                    t.extend_from_slice(&seq);
                    t.push(EOS);
                    t
                };
                let mut h = vec![0.0; d_h];
                let mut ok = true;
                for i in 0..toks.len() - 1 {
                    let cache = cell.forward(&h, emb.row(toks[i]));
                    ok &= cache.u.iter().all(|&v| v.abs() > 1e-3);
                    h = cache.o;
                }
                ok
            };
            if !kink_ok {
                continue;
            }

            // Analytic gradient via the training backward.
            let mut model = Backbone::new(
                vocab,
                emb.clone(),
                cell.clone(),
                w_out.clone(),
                vec![0.0; 4],
            )
            .unwrap();
            let lr = 1.0;
            let before = crate::gated::flatten(&model.cell);
            sgd_sequence_update(&mut model, &seq, lr);
            let after = crate::gated::flatten(&model.cell);
            let analytic: Vec<f64> = before
                .iter()
                .zip(&after)
                .map(|(b, a)| (b - a) / lr)
                .collect();

            let flat0 = crate::gated::flatten(&cell);
            let oracle = finite_difference_gradient(
                |t| {
                    let mut c = cell.clone();
                    crate::gated::load_flat(&mut c, t);
                    loss_for(&c)
                },
                &flat0,
                1e-4,
            );
            let err = max_relative_error(&analytic, &oracle);
            assert!(err <= 1e-4, "instance {inst}: rel err {err}");
            let _ = dot(&analytic, &oracle);
        }
    }
}
