//! Experiment orchestration: the decode-variant comparison table and the
//! lambda sweep, run over matched corpora and seeds so rows are paired.
//!
//! Variants:
//! - `Gemini`: jointly trained twin heads, weighted decoding plus the
//!   two-stage attribute filter.
//! - `NoKd`: faster head trained alone on its own cross-entropy, same
//!   decoding.
//! - `NoAd`: jointly trained heads, plain nucleus sampling at 0.7 on the
//!   weighted conditional.
//! - `BclmGru`: recurrent baseline scored per candidate token, which costs
//!   one discriminator cell forward per candidate and exposes the O(|V|)
//!   asymmetry in the forward-count column.

use std::fmt::Write as _;

use serde::Serialize;

use crate::backbone::{Backbone, TokenId, BOS, EOS};
use crate::corpus::{synth_corpus, LabeledSequence, SynthSpec};
use crate::error::Result;
use crate::gru::GruBaseline;
use crate::metrics::{
    attribute_relevance, corpus_resemblance, dist_n, mean_perplexity, unconditional_ppl_threshold,
    excellent_rate, OracleJudge,
};
use crate::numerics::{log_sigmoid, Rng};
use crate::sampling::{
    attribute_filter, nucleus_filter, renormalize_over, sample_next, weighted_log_scores,
    DecodeStats, Mode, Sampler, SamplerConfig,
};
use crate::training::{train_discriminator, train_gru_baseline, TrainConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum Variant {
    Gemini,
    NoKd,
    NoAd,
    BclmGru,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Gemini, Variant::NoKd, Variant::NoAd, Variant::BclmGru];

    pub fn name(&self) -> &'static str {
        match self {
            Variant::Gemini => "gemini",
            Variant::NoKd => "gemini-no-kd",
            Variant::NoAd => "gemini-no-ad",
            Variant::BclmGru => "bclm-gru",
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct AblationRow {
    pub variant: &'static str,
    pub ar: f64,
    pub ppl: f64,
    pub er: f64,
    pub dist1: f64,
    pub dist2: f64,
    pub dist3: f64,
    pub cr: f64,
    /// Backbone forwards per emitted token (decode loop only).
    pub backbone_forwards_per_token: f64,
    /// Per-candidate discriminator forwards per emitted token.
    pub disc_forwards_per_token: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct AblationTable {
    pub seeds: Vec<u64>,
    pub n_samples_per_seed: usize,
    pub rows: Vec<AblationRow>,
}

#[derive(Clone, Debug)]
pub struct AblationConfig {
    pub spec: SynthSpec,
    pub n_per_class: usize,
    pub train: TrainConfig,
    pub sampler: SamplerConfig,
    pub n_samples: usize,
    pub seeds: Vec<u64>,
    pub gru_hidden: usize,
}

impl AblationConfig {
    pub fn desk_scale(spec: SynthSpec, seeds: Vec<u64>) -> Self {
        AblationConfig {
            spec,
            n_per_class: 600,
            train: TrainConfig::desk_scale(0),
            sampler: SamplerConfig::default(),
            n_samples: 200,
            seeds,
            gru_hidden: 32,
        }
    }
}

/// Decode guided by the recurrent baseline: one backbone forward per emitted
/// token for the unconditional scores, plus one baseline cell forward per
/// candidate token for the attribute scores.
pub fn generate_gru_guided(
    backbone: &Backbone,
    gru: &GruBaseline,
    cfg: &SamplerConfig,
    prefix: &[TokenId],
    stream: u64,
) -> (Vec<TokenId>, DecodeStats) {
    let v = backbone.vocab_size();
    let mut rng = Rng::new(cfg.seed, stream);
    let mut state = backbone.init_state();
    let mut logprobs = backbone.logprobs(&state);
    let mut g_hidden = gru.init_hidden();
    for &t in prefix {
        let (next, _, lp) = backbone.step(&state, t);
        state = next;
        logprobs = lp;
        g_hidden = gru.step(&g_hidden, backbone.embed(t)).h_new;
    }

    let mut tokens = Vec::new();
    let mut stats = DecodeStats::default();
    while tokens.len() < cfg.max_len {
        let probs: Vec<f64> = logprobs.iter().map(|&lp| lp.exp()).collect();
        let base: Vec<TokenId> = (0..v)
            .filter(|&w| w != BOS && (cfg.allow_eos || w != EOS) && probs[w] > 0.0)
            .collect();
        if base.is_empty() {
            break;
        }

        // Candidate attribute scores require stepping the baseline cell once
        // per token.
        let mut log_pf = vec![0.0; v];
        let mut stepped: Vec<Option<Vec<f64>>> = vec![None; v];
        for w in 0..v {
            let cache = gru.step(&g_hidden, backbone.embed(w));
            stats.disc_forwards += 1;
            log_pf[w] = log_sigmoid(gru.logit(&cache.h_new));
            stepped[w] = Some(cache.h_new);
        }

        let mut masked = vec![0.0; v];
        for &w in &base {
            masked[w] = probs[w];
        }
        let nucleus = nucleus_filter(&masked, cfg.rho1);
        let scores = weighted_log_scores(&logprobs, &log_pf, cfg.lambda);
        let cond = renormalize_over(&nucleus, &scores);
        let kept = attribute_filter(&nucleus, &cond, &log_pf, cfg.rho2);
        let token = sample_next(&mut rng, &kept, &cond);
        if token == EOS {
            break;
        }
        tokens.push(token);
        g_hidden = stepped[token].take().expect("candidate was stepped");
        let (next, _, lp) = backbone.step(&state, token);
        stats.backbone_forwards += 1;
        state = next;
        logprobs = lp;
    }
    (tokens, stats)
}

struct VariantRun {
    samples: Vec<Vec<TokenId>>,
    stats: DecodeStats,
}

fn run_variant(
    variant: Variant,
    backbone: &Backbone,
    corpus: &[LabeledSequence],
    cfg: &AblationConfig,
    seed: u64,
) -> Result<VariantRun> {
    let train_cfg = TrainConfig {
        seed,
        kd_enabled: variant != Variant::NoKd,
        ..cfg.train.clone()
    };
    let sampler_cfg = SamplerConfig {
        seed,
        mode: match variant {
            Variant::NoAd => Mode::NoAd,
            _ => Mode::Gemini,
        },
        ..cfg.sampler.clone()
    };

    let mut samples = Vec::with_capacity(cfg.n_samples);
    let mut stats = DecodeStats::default();
    match variant {
        Variant::BclmGru => {
            let (gru, _) = train_gru_baseline(corpus, backbone, &train_cfg, cfg.gru_hidden)?;
            for stream in 0..cfg.n_samples {
                let (tokens, s) =
                    generate_gru_guided(backbone, &gru, &sampler_cfg, &[], stream as u64);
                if !tokens.is_empty() {
                    samples.push(tokens);
                }
                stats.backbone_forwards += s.backbone_forwards;
                stats.disc_forwards += s.disc_forwards;
            }
        }
        _ => {
            let (head, _) =
                train_discriminator(corpus, backbone, &cfg.spec.attribute, &train_cfg)?;
            sampler_cfg.validate()?;
            let sampler = Sampler::new(backbone, &[&head], sampler_cfg)?;
            for stream in 0..cfg.n_samples {
                let out = sampler.generate(&[], stream as u64);
                if !out.tokens.is_empty() {
                    samples.push(out.tokens);
                }
                stats.backbone_forwards += out.stats.backbone_forwards;
                stats.disc_forwards += out.stats.disc_forwards;
            }
        }
    }
    Ok(VariantRun { samples, stats })
}

/// Train and evaluate every variant on identical corpora and seeds. Each
/// seed gets its own corpus and backbone; metric cells are means over seeds.
pub fn run_ablation(cfg: &AblationConfig) -> Result<AblationTable> {
    assert!(cfg.seeds.len() >= 3, "run_ablation: need at least 3 seeds");
    let mut acc: Vec<Vec<AblationRow>> = vec![Vec::new(); Variant::ALL.len()];

    for &seed in &cfg.seeds {
        let mut spec = cfg.spec.clone();
        spec.seed = seed;
        let corpus = synth_corpus(&spec, cfg.n_per_class)?;
        let seqs: Vec<Vec<TokenId>> = corpus.iter().map(|s| s.tokens.clone()).collect();
        let bb_cfg = crate::backbone::BackboneTrainConfig {
            seed,
            ..Default::default()
        };
        let (backbone, _) = crate::backbone::train_backbone(spec.vocabulary()?, &seqs, &bb_cfg)?;
        let judge = OracleJudge(&spec);
        let tau_ppl = unconditional_ppl_threshold(&backbone, seed, 200);
        let corpus_tokens: Vec<Vec<TokenId>> =
            corpus.iter().map(|s| s.tokens.clone()).collect();

        for (vi, &variant) in Variant::ALL.iter().enumerate() {
            let run = run_variant(variant, &backbone, &corpus, cfg, seed)?;
            let n_tokens: usize = run.samples.iter().map(|s| s.len()).sum();
            let ar = attribute_relevance(&run.samples, &judge);
            let cr = corpus_resemblance(&run.samples, &corpus_tokens, &backbone, seed)?;
            acc[vi].push(AblationRow {
                variant: variant.name(),
                ar: ar.fraction,
                ppl: mean_perplexity(&backbone, &run.samples),
                er: excellent_rate(&run.samples, &judge, &backbone, 0.9, tau_ppl),
                dist1: dist_n(&run.samples, 1),
                dist2: dist_n(&run.samples, 2),
                dist3: dist_n(&run.samples, 3),
                cr,
                backbone_forwards_per_token: run.stats.backbone_forwards as f64
                    / n_tokens as f64,
                disc_forwards_per_token: run.stats.disc_forwards as f64 / n_tokens as f64,
            });
        }
    }

    let rows = acc
        .into_iter()
        .map(|per_seed| {
            let n = per_seed.len() as f64;
            let mean = |f: fn(&AblationRow) -> f64| per_seed.iter().map(f).sum::<f64>() / n;
            AblationRow {
                variant: per_seed[0].variant,
                ar: mean(|r| r.ar),
                ppl: mean(|r| r.ppl),
                er: mean(|r| r.er),
                dist1: mean(|r| r.dist1),
                dist2: mean(|r| r.dist2),
                dist3: mean(|r| r.dist3),
                cr: mean(|r| r.cr),
                backbone_forwards_per_token: mean(|r| r.backbone_forwards_per_token),
                disc_forwards_per_token: mean(|r| r.disc_forwards_per_token),
            }
        })
        .collect();

    Ok(AblationTable {
        seeds: cfg.seeds.clone(),
        n_samples_per_seed: cfg.n_samples,
        rows,
    })
}

impl AblationTable {
    pub fn to_markdown(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "| variant | AR | PPL | ER | Dist-1 | Dist-2 | Dist-3 | CR | bb fwd/tok | disc fwd/tok |"
        );
        let _ = writeln!(out, "|---|---|---|---|---|---|---|---|---|---|");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "| {} | {:.3} | {:.2} | {:.3} | {:.4} | {:.4} | {:.4} | {:.3} | {:.1} | {:.1} |",
                r.variant,
                r.ar,
                r.ppl,
                r.er,
                r.dist1,
                r.dist2,
                r.dist3,
                r.cr,
                r.backbone_forwards_per_token,
                r.disc_forwards_per_token
            );
        }
        out
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "variant,ar,ppl,er,dist1,dist2,dist3,cr,backbone_forwards_per_token,disc_forwards_per_token\n",
        );
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{},{},{}",
                r.variant,
                r.ar,
                r.ppl,
                r.er,
                r.dist1,
                r.dist2,
                r.dist3,
                r.cr,
                r.backbone_forwards_per_token,
                r.disc_forwards_per_token
            );
        }
        out
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct LambdaRow {
    pub lambda: f64,
    pub ar: f64,
    pub ppl: f64,
    pub dist1: f64,
    pub cr: f64,
}

/// Sweep decode-time lambda with a fixed trained head per seed; metric cells
/// are means over seeds. Every other knob is held at the given config.
pub fn run_lambda_sweep(
    lambdas: &[f64],
    cfg: &AblationConfig,
) -> Result<Vec<LambdaRow>> {
    assert!(!lambdas.is_empty());
    let mut rows: Vec<LambdaRow> = lambdas
        .iter()
        .map(|&l| LambdaRow {
            lambda: l,
            ar: 0.0,
            ppl: 0.0,
            dist1: 0.0,
            cr: 0.0,
        })
        .collect();

    for &seed in &cfg.seeds {
        let mut spec = cfg.spec.clone();
        spec.seed = seed;
        let corpus = synth_corpus(&spec, cfg.n_per_class)?;
        let seqs: Vec<Vec<TokenId>> = corpus.iter().map(|s| s.tokens.clone()).collect();
        let bb_cfg = crate::backbone::BackboneTrainConfig {
            seed,
            ..Default::default()
        };
        let (backbone, _) = crate::backbone::train_backbone(spec.vocabulary()?, &seqs, &bb_cfg)?;
        let train_cfg = TrainConfig {
            seed,
            ..cfg.train.clone()
        };
        let (head, _) = train_discriminator(&corpus, &backbone, &spec.attribute, &train_cfg)?;
        let judge = OracleJudge(&spec);
        let corpus_tokens: Vec<Vec<TokenId>> =
            corpus.iter().map(|s| s.tokens.clone()).collect();

        for (row, &lambda) in rows.iter_mut().zip(lambdas) {
            let sampler_cfg = SamplerConfig {
                lambda,
                seed,
                mode: Mode::Gemini,
                ..cfg.sampler.clone()
            };
            let sampler = Sampler::new(&backbone, &[&head], sampler_cfg)?;
            let samples: Vec<Vec<TokenId>> = (0..cfg.n_samples)
                .filter_map(|stream| {
                    let out = sampler.generate(&[], stream as u64);
                    (!out.tokens.is_empty()).then_some(out.tokens)
                })
                .collect();
            let k = cfg.seeds.len() as f64;
            row.ar += attribute_relevance(&samples, &judge).fraction / k;
            row.ppl += mean_perplexity(&backbone, &samples) / k;
            row.dist1 += dist_n(&samples, 1) / k;
            row.cr += corpus_resemblance(&samples, &corpus_tokens, &backbone, seed)? / k;
        }
    }
    Ok(rows)
}

pub fn lambda_sweep_csv(rows: &[LambdaRow]) -> String {
    let mut out = String::from("lambda,ar,ppl,dist1,cr\n");
    for r in rows {
        let _ = writeln!(out, "{},{},{},{},{}", r.lambda, r.ar, r.ppl, r.dist1, r.cr);
    }
    out
}

/// Spearman rank correlation with average ranks on ties.
pub fn spearman(xs: &[f64], ys: &[f64]) -> f64 {
    assert_eq!(xs.len(), ys.len());
    assert!(xs.len() >= 2);
    let rank = |vals: &[f64]| -> Vec<f64> {
        let n = vals.len();
        let mut idx: Vec<usize> = (0..n).collect();
        idx.sort_by(|&a, &b| vals[a].partial_cmp(&vals[b]).unwrap());
        let mut ranks = vec![0.0; n];
        let mut i = 0;
        while i < n {
            let mut j = i;
            while j + 1 < n && vals[idx[j + 1]] == vals[idx[i]] {
                j += 1;
            }
            let avg = (i + j) as f64 / 2.0 + 1.0;
            for &k in &idx[i..=j] {
                ranks[k] = avg;
            }
            i = j + 1;
        }
        ranks
    };
    let rx = rank(xs);
    let ry = rank(ys);
    let n = xs.len() as f64;
    let mean = (n + 1.0) / 2.0;
    let mut num = 0.0;
    let mut dx = 0.0;
    let mut dy = 0.0;
    for i in 0..xs.len() {
        num += (rx[i] - mean) * (ry[i] - mean);
        dx += (rx[i] - mean).powi(2);
        dy += (ry[i] - mean).powi(2);
    }
    num / (dx.sqrt() * dy.sqrt())
}

/// Sequences whose emission class flips from 0 to 1 at the midpoint, for
/// stepwise-trace direction tests.
pub fn switch_sequences(spec: &SynthSpec, n: usize, len: usize, seed: u64) -> Vec<Vec<TokenId>> {
    assert!(len >= 4);
    (0..n)
        .map(|i| {
            let mut rng = Rng::new(seed, i as u64);
            let half = len / 2;
            let draw = |rng: &mut Rng, y: u8| -> TokenId {
                let on = if y == 1 { &spec.s1 } else { &spec.s0 };
                let off: Vec<TokenId> = (2..spec.vocab_size)
                    .filter(|t| !on.contains(t))
                    .collect();
                if rng.next_f64() < spec.beta {
                    on[rng.gen_range(on.len())]
                } else {
                    off[rng.gen_range(off.len())]
                }
            };
            (0..len)
                .map(|p| draw(&mut rng, if p < half { 0 } else { 1 }))
                .collect()
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spearman_monotone_is_one() {
        assert!((spearman(&[0.0, 1.0, 2.0, 5.0, 8.0], &[0.1, 0.2, 0.5, 0.7, 0.9]) - 1.0).abs() < 1e-12);
        assert!((spearman(&[0.0, 1.0, 2.0], &[3.0, 2.0, 1.0]) + 1.0).abs() < 1e-12);
    }

    #[test]
    fn spearman_handles_ties() {
        let rho = spearman(&[1.0, 2.0, 3.0, 4.0], &[1.0, 1.0, 2.0, 3.0]);
        assert!(rho > 0.9, "rho {rho}");
    }

    #[test]
    fn switch_sequences_have_expected_halves() {
        let spec = SynthSpec::generate("attr", 24, 0.9, 6, 12, 1).unwrap();
        let seqs = switch_sequences(&spec, 20, 10, 7);
        for s in &seqs {
            assert_eq!(s.len(), 10);
            let first_s1 = s[..5].iter().filter(|t| spec.s1.contains(t)).count();
            let second_s1 = s[5..].iter().filter(|t| spec.s1.contains(t)).count();
            assert!(second_s1 >= first_s1);
        }
    }

    #[test]
    fn table_emitters_have_all_rows() {
        let table = AblationTable {
            seeds: vec![1, 2, 3],
            n_samples_per_seed: 10,
            rows: Variant::ALL
                .iter()
                .map(|v| AblationRow {
                    variant: v.name(),
                    ar: 0.5,
                    ppl: 10.0,
                    er: 0.25,
                    dist1: 0.1,
                    dist2: 0.2,
                    dist3: 0.3,
                    cr: 0.5,
                    backbone_forwards_per_token: 1.0,
                    disc_forwards_per_token: 0.0,
                })
                .collect(),
        };
        let md = table.to_markdown();
        let csv = table.to_csv();
        for v in Variant::ALL {
            assert!(md.contains(v.name()));
            assert!(csv.contains(v.name()));
        }
        assert_eq!(csv.lines().count(), 5);
    }
}
