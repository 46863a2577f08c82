//! Automatic evaluation: attribute relevance, perplexity, excellent rate,
//! distinct-n diversity, corpus resemblance, and the decode-speed benchmark.
//!
//! Attribute judgement goes through [`AttributeJudge`] so evaluation can use
//! either the exact generator posterior or an independently trained head.
//! The excellent-rate perplexity ceiling is relative — 1.5x the median
//! perplexity of unconditional samples — because absolute thresholds are
//! meaningless for a desk-scale backbone.

use std::time::Instant;

use serde::Serialize;

use crate::backbone::{Backbone, TokenId};
use crate::corpus::{bayes_oracle_prob, LabeledSequence, SynthSpec};
use crate::disc::{normal_prob, DiscriminatorParams};
use crate::error::{Error, Result};
use crate::sampling::{Mode, Sampler, SamplerConfig};
use crate::training::{train_normal_head, TrainConfig};

/// Scores p(attribute | sample) in [0, 1].
pub trait AttributeJudge {
    fn posterior(&self, tokens: &[TokenId]) -> f64;
}

/// The exact generator posterior; deterministic, no training involved.
pub struct OracleJudge<'a>(pub &'a SynthSpec);

impl AttributeJudge for OracleJudge<'_> {
    fn posterior(&self, tokens: &[TokenId]) -> f64 {
        bayes_oracle_prob(self.0, tokens)
    }
}

/// Normal-head posterior at the final prefix state.
pub struct HeadJudge<'a> {
    pub backbone: &'a Backbone,
    pub params: &'a DiscriminatorParams,
}

impl AttributeJudge for HeadJudge<'_> {
    fn posterior(&self, tokens: &[TokenId]) -> f64 {
        let states = self.backbone.full_hidden_states(tokens);
        normal_prob(self.params, &states.last().expect("non-empty sample").0)
    }
}

/// Distinct n-grams over total n-grams, pooled across all samples.
pub fn dist_n(samples: &[Vec<TokenId>], n: usize) -> f64 {
    assert!(n >= 1, "dist_n: n must be at least 1");
    let mut seen = std::collections::HashSet::new();
    let mut total = 0usize;
    for s in samples {
        if s.len() < n {
            continue;
        }
        for gram in s.windows(n) {
            seen.insert(gram.to_vec());
            total += 1;
        }
    }
    assert!(total > 0, "dist_n: no sample has {n} tokens");
    seen.len() as f64 / total as f64
}

#[derive(Clone, Copy, Debug, Serialize)]
pub struct ArResult {
    /// Fraction of samples with judge posterior above 1/2.
    pub fraction: f64,
    pub mean_posterior: f64,
}

pub fn attribute_relevance<J: AttributeJudge>(samples: &[Vec<TokenId>], judge: &J) -> ArResult {
    assert!(!samples.is_empty(), "attribute_relevance: no samples");
    let mut hits = 0usize;
    let mut total = 0.0;
    for s in samples {
        let p = judge.posterior(s);
        total += p;
        if p > 0.5 {
            hits += 1;
        }
    }
    ArResult {
        fraction: hits as f64 / samples.len() as f64,
        mean_posterior: total / samples.len() as f64,
    }
}

/// Fraction of samples with judge posterior above `tau_ar` and backbone
/// perplexity below `tau_ppl`.
pub fn excellent_rate<J: AttributeJudge>(
    samples: &[Vec<TokenId>],
    judge: &J,
    ppl_model: &Backbone,
    tau_ar: f64,
    tau_ppl: f64,
) -> f64 {
    assert!(!samples.is_empty(), "excellent_rate: no samples");
    let pass = samples
        .iter()
        .filter(|s| judge.posterior(s) > tau_ar && ppl_model.perplexity(s) < tau_ppl)
        .count();
    pass as f64 / samples.len() as f64
}

/// Relative perplexity ceiling: 1.5x the median perplexity of `n`
/// unconditional samples drawn from the backbone.
pub fn unconditional_ppl_threshold(backbone: &Backbone, seed: u64, n: usize) -> f64 {
    let cfg = SamplerConfig {
        mode: Mode::Uncond,
        seed,
        ..Default::default()
    };
    let sampler = Sampler::new(backbone, &[], cfg).expect("unconditional sampler");
    let mut ppls: Vec<f64> = (0..n)
        .filter_map(|stream| {
            let out = sampler.generate(&[], stream as u64);
            if out.tokens.is_empty() {
                None
            } else {
                Some(backbone.perplexity(&out.tokens))
            }
        })
        .collect();
    assert!(!ppls.is_empty(), "no non-empty unconditional samples");
    ppls.sort_by(|a, b| a.partial_cmp(b).unwrap());
    1.5 * ppls[ppls.len() / 2]
}

/// Mean perplexity of a sample set under the backbone.
pub fn mean_perplexity(backbone: &Backbone, samples: &[Vec<TokenId>]) -> f64 {
    assert!(!samples.is_empty());
    samples.iter().map(|s| backbone.perplexity(s)).sum::<f64>() / samples.len() as f64
}

/// Corpus resemblance: train a fresh normal-head classifier to tell
/// generated samples (label 1) from corpus samples (label 0) on backbone
/// features, 80/20 split, and return the mean held-out posterior on the
/// generated side. 0.5 means indistinguishable; lower is better for the
/// generator.
pub fn corpus_resemblance(
    generated: &[Vec<TokenId>],
    corpus: &[Vec<TokenId>],
    backbone: &Backbone,
    seed: u64,
) -> Result<f64> {
    if generated.len() < 100 || corpus.len() < 100 {
        return Err(Error::InsufficientData(format!(
            "corpus_resemblance needs at least 100 samples per side, got {} and {}",
            generated.len(),
            corpus.len()
        )));
    }
    let mut data: Vec<LabeledSequence> = Vec::with_capacity(generated.len() + corpus.len());
    for s in generated {
        data.push(LabeledSequence {
            tokens: s.clone(),
            label: 1,
            attribute: "source".into(),
        });
    }
    for s in corpus {
        data.push(LabeledSequence {
            tokens: s.clone(),
            label: 0,
            attribute: "source".into(),
        });
    }
    // Sequences shorter than two tokens cannot be scored by the heads.
    data.retain(|s| s.tokens.len() >= 2);
    let (train, test) = crate::corpus::split(&data, 0.8, seed);
    let cfg = TrainConfig {
        epochs: 60,
        lr: 3e-3,
        batch_size: 32,
        seed,
        ..Default::default()
    };
    let (clf, _) = train_normal_head(&train, backbone, "source", &cfg)?;
    let judge = HeadJudge {
        backbone,
        params: &clf,
    };
    let held_out: Vec<&LabeledSequence> = test.iter().filter(|s| s.label == 1).collect();
    if held_out.is_empty() {
        return Err(Error::InsufficientData(
            "no generated samples in the held-out split".into(),
        ));
    }
    Ok(held_out
        .iter()
        .map(|s| judge.posterior(&s.tokens))
        .sum::<f64>()
        / held_out.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum BenchMode {
    /// Whole-vocabulary scoring via the faster head: 1 backbone forward per
    /// emitted token.
    Faster,
    /// Per-candidate backbone stepping plus the normal head: |V| backbone
    /// forwards per emitted token.
    NaiveNormal,
}

#[derive(Clone, Debug, Serialize)]
pub struct BenchResult {
    pub mode: BenchMode,
    pub n_samples: usize,
    pub tokens: u64,
    /// Mean and standard deviation of per-sample mean seconds per token.
    pub mean_s: f64,
    pub std_s: f64,
    /// Exact backbone forwards inside the decode loops.
    pub backbone_forwards: u64,
}

/// Time-per-token benchmark. Samples are fixed-length (`<eos>` banned) so
/// forward counts are exact: `tokens` per sample in faster mode and
/// `tokens * |V|` in naive mode. Runs single-threaded.
pub fn bench_time_per_token(
    backbone: &Backbone,
    head: &DiscriminatorParams,
    n_samples: usize,
    mode: BenchMode,
    seed: u64,
    max_len: usize,
) -> BenchResult {
    assert!(n_samples > 0 && max_len > 0);
    let cfg = SamplerConfig {
        seed,
        max_len,
        allow_eos: false,
        ..Default::default()
    };
    let sampler = Sampler::new(backbone, &[head], cfg).expect("bench sampler");
    let mut per_sample: Vec<f64> = Vec::with_capacity(n_samples);
    let mut tokens = 0u64;
    let mut forwards = 0u64;
    for stream in 0..n_samples {
        let started = Instant::now();
        let out = match mode {
            BenchMode::Faster => sampler.generate(&[], stream as u64),
            BenchMode::NaiveNormal => sampler.generate_naive_normal(&[], stream as u64),
        };
        let elapsed = started.elapsed().as_secs_f64();
        assert!(!out.tokens.is_empty());
        per_sample.push(elapsed / out.tokens.len() as f64);
        tokens += out.tokens.len() as u64;
        forwards += out.stats.backbone_forwards;
    }
    let mean = per_sample.iter().sum::<f64>() / n_samples as f64;
    let var = per_sample
        .iter()
        .map(|x| (x - mean) * (x - mean))
        .sum::<f64>()
        / n_samples as f64;
    BenchResult {
        mode,
        n_samples,
        tokens,
        mean_s: mean,
        std_s: var.sqrt(),
        backbone_forwards: forwards,
    }
}

/// Evaluation report for a sample set; serialized as a single JSON document.
#[derive(Clone, Debug, Serialize)]
pub struct EvalReport {
    pub n_samples: usize,
    pub ar: f64,
    pub mean_posterior: f64,
    pub ppl: f64,
    pub er: f64,
    pub tau_ar: f64,
    pub tau_ppl: f64,
    pub dist1: f64,
    pub dist2: f64,
    pub dist3: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cr: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub time_per_token_s: Option<f64>,
    pub config: serde_json::Value,
}

/// Score a sample set with a judge and the backbone as perplexity model.
pub fn evaluate<J: AttributeJudge>(
    samples: &[Vec<TokenId>],
    judge: &J,
    backbone: &Backbone,
    ppl_seed: u64,
    config: serde_json::Value,
) -> Result<EvalReport> {
    if samples.is_empty() {
        return Err(Error::InsufficientData("no samples to evaluate".into()));
    }
    let ar = attribute_relevance(samples, judge);
    let tau_ppl = unconditional_ppl_threshold(backbone, ppl_seed, 200);
    let tau_ar = 0.9;
    Ok(EvalReport {
        n_samples: samples.len(),
        ar: ar.fraction,
        mean_posterior: ar.mean_posterior,
        ppl: mean_perplexity(backbone, samples),
        er: excellent_rate(samples, judge, backbone, tau_ar, tau_ppl),
        tau_ar,
        tau_ppl,
        dist1: dist_n(samples, 1),
        dist2: dist_n(samples, 2),
        dist3: dist_n(samples, 3),
        cr: None,
        time_per_token_s: None,
        config,
    })
}
