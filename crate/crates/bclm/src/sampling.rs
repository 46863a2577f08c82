//! Decode-time machinery: weighted Bayes scoring, the two-stage
//! attribute-driven nucleus filter, multi-attribute composition, and the
//! generation loops.
//!
//! Per step the conditional score of token `w` is
//! `log p(w|X) + lambda * sum_j log p_f_j(a_j|X, w)`. The first filter is
//! plain nucleus truncation of the unconditional distribution at mass rho1;
//! the second orders the surviving set by attribute likelihood and keeps the
//! smallest head whose conditional mass (renormalized over the nucleus set)
//! reaches rho2. Conventions that make every run reproducible bit-for-bit:
//! sorts break ties by ascending token id, reductions over token sets run in
//! ascending token id order, and exactly one RNG draw is consumed per
//! emitted token no matter how small the candidate set is.
//!
//! With the faster head the backbone advances exactly once per emitted token;
//! the naive normal-head decoder used by the benchmarks instead re-scores
//! every candidate by stepping the backbone, |V| forwards per token, and
//! adopts the already-stepped state of the sampled candidate.

use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, BackboneState, TokenId, BOS, EOS};
use crate::disc::{normal_logit, DiscriminatorParams, VocabScorer};
use crate::error::{Error, Result};
use crate::numerics::{log_sigmoid, sigmoid, Rng};

/// Fixed nucleus mass for the plain-nucleus decode mode.
pub const NO_AD_RHO: f64 = 0.7;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    /// Weighted scores plus the two-stage attribute-driven nucleus filter.
    Gemini,
    /// Weighted scores with plain nucleus sampling at mass 0.7.
    NoAd,
    /// Ancestral sampling from the backbone alone.
    Uncond,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub lambda: f64,
    pub rho1: f64,
    pub rho2: f64,
    pub max_len: usize,
    pub seed: u64,
    pub mode: Mode,
    /// When false, `<eos>` is removed from the candidate set and samples run
    /// to `max_len` (fixed-length truncation); timing benchmarks use this.
    pub allow_eos: bool,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            lambda: 5.0,
            rho1: 0.9,
            rho2: 0.3,
            max_len: 40,
            seed: 0,
            mode: Mode::Gemini,
            allow_eos: true,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lambda < 0.0 {
            return Err(Error::BadConfig("lambda must be non-negative".into()));
        }
        if !(self.rho1 > 0.0 && self.rho1 <= 1.0 && self.rho2 > 0.0 && self.rho2 <= 1.0) {
            return Err(Error::BadConfig("rho1 and rho2 must lie in (0, 1]".into()));
        }
        Ok(())
    }
}

/// Unnormalized weighted log scores `log p(w|X) + lambda * log p_f(w)`.
pub fn weighted_log_scores(logp_uncond: &[f64], log_pf: &[f64], lambda: f64) -> Vec<f64> {
    assert!(lambda >= 0.0, "lambda must be non-negative");
    assert_eq!(logp_uncond.len(), log_pf.len());
    logp_uncond
        .iter()
        .zip(log_pf)
        .map(|(&lp, &lf)| lp + lambda * lf)
        .collect()
}

/// Standard nucleus filter: order tokens by probability descending (ties by
/// ascending id), keep the smallest prefix whose cumulative mass reaches
/// `rho1`. Zero-probability tokens never enter; the result is never empty.
/// Returned ids keep the filter's descending-probability order.
pub fn nucleus_filter(probs: &[f64], rho1: f64) -> Vec<TokenId> {
    let mut order: Vec<TokenId> = (0..probs.len()).filter(|&w| probs[w] > 0.0).collect();
    order.sort_by(|&a, &b| {
        probs[b]
            .partial_cmp(&probs[a])
            .expect("probabilities must not be NaN")
            .then(a.cmp(&b))
    });
    assert!(!order.is_empty(), "nucleus_filter: no positive-mass tokens");
    let mut cum = 0.0;
    let mut cut = order.len();
    for (k, &w) in order.iter().enumerate() {
        cum += probs[w];
        if cum >= rho1 {
            cut = k + 1;
            break;
        }
    }
    order.truncate(cut);
    order
}

/// Attribute-driven filter: order the nucleus set by attribute likelihood
/// descending (ties by ascending id) and keep the smallest prefix whose
/// *conditional* mass (probabilities renormalized over the nucleus set)
/// reaches `rho2`. `cond` and `log_pf` are full-vocabulary tables indexed by
/// token id. Returns a non-empty subset in that order.
pub fn attribute_filter(
    nucleus: &[TokenId],
    cond: &[f64],
    log_pf: &[f64],
    rho2: f64,
) -> Vec<TokenId> {
    assert!(!nucleus.is_empty(), "attribute_filter: empty nucleus set");
    let mut order: Vec<TokenId> = nucleus.to_vec();
    order.sort_by(|&a, &b| {
        log_pf[b]
            .partial_cmp(&log_pf[a])
            .expect("attribute scores must not be NaN")
            .then(a.cmp(&b))
    });
    let mut cum = 0.0;
    let mut cut = order.len();
    for (k, &w) in order.iter().enumerate() {
        cum += cond[w];
        if cum >= rho2 {
            cut = k + 1;
            break;
        }
    }
    order.truncate(cut);
    order
}

/// Renormalize `scores` over a token set: full-vocabulary table with
/// `exp(s_w - logsumexp)` for members and 0 elsewhere. The log-sum-exp runs
/// over ascending token id so all paths agree bitwise.
pub fn renormalize_over(ids: &[TokenId], scores: &[f64]) -> Vec<f64> {
    assert!(!ids.is_empty(), "renormalize_over: empty set");
    let mut asc = ids.to_vec();
    asc.sort_unstable();
    let max = asc
        .iter()
        .map(|&w| scores[w])
        .fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for &w in &asc {
        sum += (scores[w] - max).exp();
    }
    let log_z = max + sum.ln();
    let mut out = vec![0.0; scores.len()];
    for &w in &asc {
        out[w] = (scores[w] - log_z).exp();
    }
    out
}

/// Draw one token from a candidate set with (possibly unnormalized) weights
/// given as a full-vocabulary table. Inverse CDF over ascending token id;
/// exactly one RNG draw is consumed, even for a single candidate.
pub fn sample_next(rng: &mut Rng, ids: &[TokenId], weights: &[f64]) -> TokenId {
    assert!(!ids.is_empty(), "sample_next: empty candidate set");
    let mut asc = ids.to_vec();
    asc.sort_unstable();
    let mut total = 0.0;
    for &w in &asc {
        total += weights[w];
    }
    let u = rng.next_f64() * total;
    let mut cum = 0.0;
    for &w in &asc {
        cum += weights[w];
        if u < cum {
            return w;
        }
    }
    *asc.last().unwrap()
}

/// Combined attribute log-likelihood `sum_j log sigma(m_f_j(w))` per token.
pub fn multi_attribute_log_pf(per_head_logits: &[Vec<f64>]) -> Vec<f64> {
    assert!(!per_head_logits.is_empty(), "need at least one head");
    let v = per_head_logits[0].len();
    let mut out = vec![0.0; v];
    for logits in per_head_logits {
        assert_eq!(logits.len(), v, "head vocabulary sizes differ");
        for (o, &m) in out.iter_mut().zip(logits) {
            *o += log_sigmoid(m);
        }
    }
    out
}

/// Validate that every head was trained against the given backbone hash.
pub fn check_head_compat(backbone_hash: u64, heads: &[(String, u64)]) -> Result<()> {
    for (name, hash) in heads {
        if *hash != backbone_hash {
            return Err(Error::HashMismatch(format!(
                "discriminator {name:?} was trained against a different backbone \
                 (hash {hash:#018x} vs {backbone_hash:#018x})"
            )));
        }
    }
    Ok(())
}

/// Per-emitted-token trace record for audit output.
#[derive(Clone, Debug, Serialize)]
pub struct StepTrace {
    pub token: TokenId,
    pub p_uncond: f64,
    /// Per head, sigma of the faster-head logit for the chosen token.
    pub p_f: Vec<f64>,
    pub in_vk: bool,
    pub in_um: bool,
}

#[derive(Clone, Copy, Debug, Default, Serialize)]
pub struct DecodeStats {
    /// Backbone cell applications inside the decode loop (prefix excluded).
    pub backbone_forwards: u64,
    /// Per-candidate discriminator forwards (naive and recurrent decoders).
    pub disc_forwards: u64,
}

pub struct GenerateOutput {
    pub tokens: Vec<TokenId>,
    pub stats: DecodeStats,
    pub trace: Vec<StepTrace>,
}

/// Decoder binding a frozen backbone to zero or more attribute heads. The
/// per-head vocabulary scorers are precomputed once at construction.
pub struct Sampler<'a> {
    backbone: &'a Backbone,
    heads: Vec<&'a DiscriminatorParams>,
    scorers: Vec<VocabScorer>,
    cfg: SamplerConfig,
}

impl<'a> Sampler<'a> {
    pub fn new(
        backbone: &'a Backbone,
        heads: &[&'a DiscriminatorParams],
        cfg: SamplerConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        for p in heads {
            if p.d_h() != backbone.d_h() || p.d_e() != backbone.d_e() {
                return Err(Error::BadConfig(format!(
                    "head {:?} dims ({}, {}) do not match backbone ({}, {})",
                    p.attribute,
                    p.d_h(),
                    p.d_e(),
                    backbone.d_h(),
                    backbone.d_e()
                )));
            }
        }
        if cfg.mode != Mode::Uncond && heads.is_empty() {
            return Err(Error::BadConfig(
                "attribute-guided modes need at least one discriminator".into(),
            ));
        }
        let scorers = heads
            .iter()
            .map(|p| VocabScorer::new(p, backbone.embedding_table()))
            .collect();
        Ok(Sampler {
            backbone,
            heads: heads.to_vec(),
            scorers,
            cfg,
        })
    }

    pub fn config(&self) -> &SamplerConfig {
        &self.cfg
    }

    fn combined_log_pf(&self, h_prev: &[f64]) -> (Vec<f64>, Vec<Vec<f64>>) {
        let per_head: Vec<Vec<f64>> = self
            .heads
            .iter()
            .zip(&self.scorers)
            .map(|(p, s)| s.scores(p, h_prev))
            .collect();
        let combined = multi_attribute_log_pf(&per_head);
        (combined, per_head)
    }

    /// Candidate ids: positive unconditional probability, never `<bos>`,
    /// `<eos>` only when permitted.
    fn base_candidates(&self, probs: &[f64]) -> Vec<TokenId> {
        (0..probs.len())
            .filter(|&w| w != BOS && (self.cfg.allow_eos || w != EOS) && probs[w] > 0.0)
            .collect()
    }

    /// Generate one sample. `stream` selects the per-sample RNG stream of the
    /// configured seed. The prefix is consumed before the decode loop; inside
    /// the loop the backbone advances exactly once per emitted token.
    pub fn generate(&self, prefix: &[TokenId], stream: u64) -> GenerateOutput {
        for &t in prefix {
            assert!(t < self.backbone.vocab_size(), "prefix token out of range");
        }
        let mut rng = Rng::new(self.cfg.seed, stream);
        let mut state = self.backbone.init_state();
        let mut logprobs = self.backbone.logprobs(&state);
        for &t in prefix {
            let (next, _, lp) = self.backbone.step(&state, t);
            state = next;
            logprobs = lp;
        }

        let mut out = GenerateOutput {
            tokens: Vec::new(),
            stats: DecodeStats::default(),
            trace: Vec::new(),
        };
        while out.tokens.len() < self.cfg.max_len {
            let probs: Vec<f64> = logprobs.iter().map(|&lp| lp.exp()).collect();
            let base = self.base_candidates(&probs);
            if base.is_empty() {
                break;
            }

            let (token, trace) = match self.cfg.mode {
                Mode::Uncond => {
                    let cond = renormalize_over(&base, &logprobs);
                    let token = sample_next(&mut rng, &base, &cond);
                    let trace = StepTrace {
                        token,
                        p_uncond: probs[token],
                        p_f: Vec::new(),
                        in_vk: true,
                        in_um: true,
                    };
                    (token, trace)
                }
                Mode::NoAd => {
                    let (log_pf, per_head) = self.combined_log_pf(&state.h);
                    let scores = weighted_log_scores(&logprobs, &log_pf, self.cfg.lambda);
                    let cond = renormalize_over(&base, &scores);
                    let nucleus = nucleus_filter(&cond, NO_AD_RHO);
                    let cond_nucleus = renormalize_over(&nucleus, &scores);
                    let token = sample_next(&mut rng, &nucleus, &cond_nucleus);
                    let trace = StepTrace {
                        token,
                        p_uncond: probs[token],
                        p_f: per_head.iter().map(|m| sigmoid(m[token])).collect(),
                        in_vk: nucleus.contains(&token),
                        in_um: true,
                    };
                    (token, trace)
                }
                Mode::Gemini => {
                    // Filter 1 on the unconditional distribution, restricted
                    // to the candidate set.
                    let mut masked = vec![0.0; probs.len()];
                    for &w in &base {
                        masked[w] = probs[w];
                    }
                    let nucleus = nucleus_filter(&masked, self.cfg.rho1);
                    let (log_pf, per_head) = self.combined_log_pf(&state.h);
                    let scores = weighted_log_scores(&logprobs, &log_pf, self.cfg.lambda);
                    let cond = renormalize_over(&nucleus, &scores);
                    let kept = attribute_filter(&nucleus, &cond, &log_pf, self.cfg.rho2);
                    let token = sample_next(&mut rng, &kept, &cond);
                    let trace = StepTrace {
                        token,
                        p_uncond: probs[token],
                        p_f: per_head.iter().map(|m| sigmoid(m[token])).collect(),
                        in_vk: true,
                        in_um: true,
                    };
                    (token, trace)
                }
            };

            if token == EOS {
                break;
            }
            out.tokens.push(token);
            out.trace.push(trace);
            let (next, _, lp) = self.backbone.step(&state, token);
            out.stats.backbone_forwards += 1;
            state = next;
            logprobs = lp;
        }
        out
    }

    /// The O(|V|) reference decoder: per emitted token every candidate `w` is
    /// scored by stepping the backbone to the hidden state of `{X, w}` and
    /// applying the normal head. The sampled candidate's already-stepped
    /// state is adopted, so the loop costs exactly |V| backbone forwards per
    /// emitted token.
    pub fn generate_naive_normal(&self, prefix: &[TokenId], stream: u64) -> GenerateOutput {
        let v = self.backbone.vocab_size();
        let mut rng = Rng::new(self.cfg.seed, stream);
        let mut state = self.backbone.init_state();
        let mut logprobs = self.backbone.logprobs(&state);
        for &t in prefix {
            let (next, _, lp) = self.backbone.step(&state, t);
            state = next;
            logprobs = lp;
        }

        let mut out = GenerateOutput {
            tokens: Vec::new(),
            stats: DecodeStats::default(),
            trace: Vec::new(),
        };
        while out.tokens.len() < self.cfg.max_len {
            let probs: Vec<f64> = logprobs.iter().map(|&lp| lp.exp()).collect();
            let base = self.base_candidates(&probs);
            if base.is_empty() {
                break;
            }

            // Score all candidates by stepping the backbone once per token,
            // keeping the stepped states for adoption.
            let mut stepped: Vec<Option<(BackboneState, Vec<f64>)>> = vec![None; v];
            let mut log_pf = vec![0.0; v];
            for w in 0..v {
                let (next, h, lp) = self.backbone.step(&state, w);
                out.stats.backbone_forwards += 1;
                for p in &self.heads {
                    log_pf[w] += log_sigmoid(normal_logit(p, &h));
                    out.stats.disc_forwards += 1;
                }
                stepped[w] = Some((next, lp));
            }

            let mut masked = vec![0.0; v];
            for &w in &base {
                masked[w] = probs[w];
            }
            let nucleus = nucleus_filter(&masked, self.cfg.rho1);
            let scores = weighted_log_scores(&logprobs, &log_pf, self.cfg.lambda);
            let cond = renormalize_over(&nucleus, &scores);
            let kept = attribute_filter(&nucleus, &cond, &log_pf, self.cfg.rho2);
            let token = sample_next(&mut rng, &kept, &cond);
            if token == EOS {
                break;
            }
            out.tokens.push(token);
            out.trace.push(StepTrace {
                token,
                p_uncond: probs[token],
                p_f: vec![log_pf[token].exp()],
                in_vk: true,
                in_um: true,
            });
            let (next, lp) = stepped[token].take().expect("candidate was scored");
            state = next;
            logprobs = lp;
        }
        out
    }
}

/// Which head the stepwise trace reads.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TraceHead {
    /// `sigma(m_f(h_{i-1}, e_{x_i}))` — the value decode-time guidance uses.
    Faster,
    /// `sigma(m_n(h_i))` — the teacher's view of the same prefix.
    Normal,
}

/// Per-prefix attribute probabilities along a given sequence, one value for
/// each position i = 2..T (the first token has no previous hidden state).
pub fn stepwise_trace(
    backbone: &Backbone,
    params: &DiscriminatorParams,
    tokens: &[TokenId],
    head: TraceHead,
) -> Vec<f64> {
    assert!(tokens.len() >= 2, "stepwise_trace: need at least two tokens");
    let states = backbone.full_hidden_states(tokens);
    (1..tokens.len())
        .map(|i| match head {
            TraceHead::Faster => sigmoid(crate::disc::faster_logit(
                params,
                &states[i - 1].0,
                backbone.embed(tokens[i]),
            )),
            TraceHead::Normal => sigmoid(normal_logit(params, &states[i].0)),
        })
        .collect()
}
