//! Labeled-corpus ingestion and the synthetic attribute language that stands
//! in for large labeled datasets at desk scale.
//!
//! The generator is i.i.d. by construction so the Bayes-optimal judge is
//! exact and cheap: a class-`y` sequence emits each token from the class
//! subset `S_y` with probability `beta`, otherwise uniformly from the rest of
//! the non-reserved vocabulary (the neutral tokens plus the other class's
//! subset). The two class-conditional emission distributions are therefore
//!
//! ```text
//! p(t | y) = beta / |S_y|            if t in S_y
//! p(t | y) = (1 - beta) / (V - |S_y|) otherwise
//! ```
//!
//! with `V` the number of non-reserved tokens, and the oracle posterior is
//! the exact likelihood-ratio posterior under equal priors. With `beta = 0.5`
//! and symmetric subsets the two distributions coincide, so the task is
//! unlearnable, which the calibration tests exploit.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backbone::{TokenId, Vocabulary};
use crate::error::{Error, Result};
use crate::numerics::{sigmoid, Rng};

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledSequence {
    pub tokens: Vec<TokenId>,
    /// 1 when the sequence carries the attribute, 0 otherwise.
    pub label: u8,
    pub attribute: String,
}

/// Synthetic attribute-language parameters. `s1` and `s0` are disjoint token
/// subsets carrying the two classes; everything else non-reserved is neutral.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct SynthSpec {
    pub attribute: String,
    pub vocab_size: usize,
    pub s1: Vec<TokenId>,
    pub s0: Vec<TokenId>,
    pub beta: f64,
    pub t_min: usize,
    pub t_max: usize,
    pub seed: u64,
}

impl SynthSpec {
    /// Seeded random partition: a quarter of the non-reserved vocabulary per
    /// class subset, the rest neutral. Different seeds give independently
    /// placed subsets over the same vocabulary, which is how a second
    /// attribute is constructed.
    pub fn generate(
        attribute: &str,
        vocab_size: usize,
        beta: f64,
        t_min: usize,
        t_max: usize,
        seed: u64,
    ) -> Result<Self> {
        if vocab_size < 10 {
            return Err(Error::BadConfig("vocab too small for class subsets".into()));
        }
        let mut ids: Vec<TokenId> = (2..vocab_size).collect();
        let mut rng = Rng::new(seed, 0);
        rng.shuffle(&mut ids);
        let quarter = ids.len() / 4;
        let mut s1: Vec<TokenId> = ids[..quarter].to_vec();
        let mut s0: Vec<TokenId> = ids[quarter..2 * quarter].to_vec();
        s1.sort_unstable();
        s0.sort_unstable();
        let spec = SynthSpec {
            attribute: attribute.to_string(),
            vocab_size,
            s1,
            s0,
            beta,
            t_min,
            t_max,
            seed,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Checks the invariants a corpus-producing spec must satisfy. Degenerate
    /// specs (e.g. `beta = 0.5`) can still be built directly for calibration
    /// tests, which bypass this.
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 3 {
            return Err(Error::BadConfig("vocab_size must be at least 3".into()));
        }
        if !(self.beta > 0.5 && self.beta <= 1.0) {
            return Err(Error::BadConfig(format!(
                "beta must lie in (0.5, 1.0], got {}",
                self.beta
            )));
        }
        if self.t_min < 2 || self.t_max < self.t_min {
            return Err(Error::BadConfig("need 2 <= t_min <= t_max".into()));
        }
        if self.s1.is_empty() || self.s0.is_empty() {
            return Err(Error::BadConfig("class subsets must be non-empty".into()));
        }
        for &t in self.s1.iter().chain(&self.s0) {
            if t < 2 || t >= self.vocab_size {
                return Err(Error::BadConfig(format!(
                    "class token id {t} outside non-reserved range"
                )));
            }
        }
        if self.s1.iter().any(|t| self.s0.contains(t)) {
            return Err(Error::BadConfig("class subsets must be disjoint".into()));
        }
        Ok(())
    }

    pub fn vocabulary(&self) -> Result<Vocabulary> {
        Vocabulary::synthetic(self.vocab_size)
    }

    fn non_reserved(&self) -> usize {
        self.vocab_size - 2
    }

    fn class_subset(&self, y: u8) -> &[TokenId] {
        if y == 1 {
            &self.s1
        } else {
            &self.s0
        }
    }

    /// Non-reserved tokens outside the given class subset, ascending.
    fn off_class(&self, y: u8) -> Vec<TokenId> {
        let subset = self.class_subset(y);
        (2..self.vocab_size)
            .filter(|t| !subset.contains(t))
            .collect()
    }

    /// Neutral tokens (outside both class subsets), ascending.
    pub fn neutral(&self) -> Vec<TokenId> {
        (2..self.vocab_size)
            .filter(|t| !self.s1.contains(t) && !self.s0.contains(t))
            .collect()
    }

    /// Exact emission probability of a token under class `y`.
    pub fn emission_prob(&self, token: TokenId, y: u8) -> f64 {
        let subset = self.class_subset(y);
        if subset.contains(&token) {
            self.beta / subset.len() as f64
        } else {
            (1.0 - self.beta) / (self.non_reserved() - subset.len()) as f64
        }
    }
}

/// Draw a labeled corpus: `n_per_class` class-1 sequences followed by
/// `n_per_class` class-0 sequences. Sample `i` uses RNG stream `i`, so
/// corpora are reproducible regardless of evaluation order.
pub fn synth_corpus(spec: &SynthSpec, n_per_class: usize) -> Result<Vec<LabeledSequence>> {
    spec.validate()?;
    if n_per_class == 0 {
        return Err(Error::BadConfig("n_per_class must be at least 1".into()));
    }
    Ok(synth_corpus_unchecked(spec, n_per_class))
}

/// Generation without the validity gate, used by calibration tests that
/// construct deliberately degenerate specs.
pub fn synth_corpus_unchecked(spec: &SynthSpec, n_per_class: usize) -> Vec<LabeledSequence> {
    let mut out = Vec::with_capacity(2 * n_per_class);
    for i in 0..2 * n_per_class {
        let y: u8 = if i < n_per_class { 1 } else { 0 };
        let mut rng = Rng::new(spec.seed, i as u64);
        let len = spec.t_min + rng.gen_range(spec.t_max - spec.t_min + 1);
        let on = spec.class_subset(y);
        let off = spec.off_class(y);
        let tokens = (0..len)
            .map(|_| {
                if rng.next_f64() < spec.beta {
                    on[rng.gen_range(on.len())]
                } else {
                    off[rng.gen_range(off.len())]
                }
            })
            .collect();
        out.push(LabeledSequence {
            tokens,
            label: y,
            attribute: spec.attribute.clone(),
        });
    }
    out
}

/// Log likelihood ratio `ln p(X|y=1) - ln p(X|y=0)` under the generator.
/// Reserved tokens contribute nothing.
pub fn bayes_oracle_log_ratio(spec: &SynthSpec, tokens: &[TokenId]) -> f64 {
    let mut llr = 0.0;
    for &t in tokens {
        if t < 2 {
            continue;
        }
        llr += spec.emission_prob(t, 1).ln() - spec.emission_prob(t, 0).ln();
    }
    llr
}

/// Exact posterior `p(y=1 | X)` under equal class priors.
pub fn bayes_oracle_prob(spec: &SynthSpec, tokens: &[TokenId]) -> f64 {
    assert!(!tokens.is_empty(), "bayes_oracle_prob: empty sequence");
    sigmoid(bayes_oracle_log_ratio(spec, tokens))
}

/// FNV-style content hash of a labeled corpus, used to tie feature caches to
/// the corpus they were built from.
pub fn corpus_hash(data: &[LabeledSequence]) -> u64 {
    let mut bytes = Vec::new();
    for seq in data {
        bytes.extend_from_slice(&(seq.tokens.len() as u32).to_le_bytes());
        for &t in &seq.tokens {
            bytes.extend_from_slice(&(t as u32).to_le_bytes());
        }
        bytes.push(seq.label);
        bytes.extend_from_slice(&(seq.attribute.len() as u32).to_le_bytes());
        bytes.extend_from_slice(seq.attribute.as_bytes());
    }
    crate::checkpoint::fnv1a64(&bytes)
}

#[derive(Serialize, Deserialize)]
struct JsonRecord {
    tokens: Vec<String>,
    label: u8,
    attribute: String,
}

/// Write a corpus as JSON-lines. A `_meta` first line carries the effective
/// configuration and input hashes; `load_jsonl` skips it.
pub fn save_jsonl(
    path: &Path,
    data: &[LabeledSequence],
    vocab: &Vocabulary,
    meta: Option<&serde_json::Value>,
) -> Result<()> {
    let mut f = fs::File::create(path)?;
    if let Some(meta) = meta {
        let line = serde_json::json!({ "_meta": meta });
        writeln!(f, "{line}")?;
    }
    for seq in data {
        let rec = JsonRecord {
            tokens: seq.tokens.iter().map(|&t| vocab.token(t).to_string()).collect(),
            label: seq.label,
            attribute: seq.attribute.clone(),
        };
        writeln!(f, "{}", serde_json::to_string(&rec).expect("serializable"))?;
    }
    Ok(())
}

/// Read the `_meta` header of a JSON-lines artifact, if present.
pub fn read_jsonl_meta(path: &Path) -> Result<Option<serde_json::Value>> {
    if !path.exists() {
        return Err(Error::MissingFile(path.display().to_string()));
    }
    let f = BufReader::new(fs::File::open(path)?);
    if let Some(line) = f.lines().next() {
        let line = line?;
        if let Ok(v) = serde_json::from_str::<serde_json::Value>(&line) {
            if let Some(meta) = v.get("_meta") {
                return Ok(Some(meta.clone()));
            }
        }
    }
    Ok(None)
}

/// Load a JSON-lines corpus, mapping tokens through the vocabulary. Records
/// keep file order; blank and `_meta` lines are skipped; anything else
/// malformed reports its line number.
pub fn load_jsonl(path: &Path, vocab: &Vocabulary) -> Result<Vec<LabeledSequence>> {
    if !path.exists() {
        return Err(Error::MissingFile(path.display().to_string()));
    }
    let f = BufReader::new(fs::File::open(path)?);
    let mut out = Vec::new();
    for (lineno, line) in f.lines().enumerate() {
        let line = line?;
        let trimmed = line.trim();
        if trimmed.is_empty() {
            continue;
        }
        if let Ok(v) = serde_json::from_str::<serde_json::Value>(trimmed) {
            if v.get("_meta").is_some() {
                continue;
            }
        }
        let rec: JsonRecord =
            serde_json::from_str(trimmed).map_err(|e| Error::MalformedCorpus {
                line: lineno + 1,
                msg: e.to_string(),
            })?;
        if rec.label > 1 {
            return Err(Error::MalformedCorpus {
                line: lineno + 1,
                msg: format!("label must be 0 or 1, got {}", rec.label),
            });
        }
        let tokens = rec
            .tokens
            .iter()
            .map(|t| vocab.id(t).ok_or_else(|| Error::UnknownToken(t.clone())))
            .collect::<Result<Vec<_>>>()?;
        out.push(LabeledSequence {
            tokens,
            label: rec.label,
            attribute: rec.attribute,
        });
    }
    Ok(out)
}

/// Deterministic split into (first, second) parts of sizes
/// `round(frac * n)` / rest. Membership is drawn by seeded shuffle; both
/// parts keep the original corpus order.
pub fn split(
    data: &[LabeledSequence],
    frac: f64,
    seed: u64,
) -> (Vec<LabeledSequence>, Vec<LabeledSequence>) {
    assert!((0.0..=1.0).contains(&frac), "split fraction out of range");
    let n = data.len();
    let take = (frac * n as f64).round() as usize;
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = Rng::new(seed, 0);
    rng.shuffle(&mut idx);
    let mut in_first = vec![false; n];
    for &i in idx.iter().take(take) {
        in_first[i] = true;
    }
    let mut first = Vec::with_capacity(take);
    let mut second = Vec::with_capacity(n - take);
    for (i, seq) in data.iter().enumerate() {
        if in_first[i] {
            first.push(seq.clone());
        } else {
            second.push(seq.clone());
        }
    }
    (first, second)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec() -> SynthSpec {
        SynthSpec::generate("attr", 64, 0.7, 8, 32, 5).unwrap()
    }

    #[test]
    fn partition_is_disjoint_and_quartered() {
        let s = spec();
        assert_eq!(s.s1.len(), 15); // (64-2)/4
        assert_eq!(s.s0.len(), 15);
        assert!(s.s1.iter().all(|t| !s.s0.contains(t)));
        assert_eq!(s.neutral().len(), 62 - 30);
    }

    #[test]
    fn beta_one_emits_only_class_tokens() {
        let mut s = spec();
        s.beta = 1.0;
        let corpus = synth_corpus(&s, 20).unwrap();
        for seq in corpus.iter().filter(|s| s.label == 1) {
            assert!(seq.tokens.iter().all(|t| s.s1.contains(t)));
        }
    }

    #[test]
    fn generator_is_deterministic() {
        let s = spec();
        let a = synth_corpus(&s, 10).unwrap();
        let b = synth_corpus(&s, 10).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn symmetric_beta_half_is_unlearnable() {
        // beta = 0.5 with no neutral tokens: both emission distributions are
        // uniform over s0 union s1, so the oracle cannot beat chance.
        let mut s = SynthSpec::generate("attr", 34, 0.7, 8, 32, 6).unwrap();
        s.s1 = (2..18).collect();
        s.s0 = (18..34).collect();
        s.beta = 0.5;
        let corpus = synth_corpus_unchecked(&s, 1000);
        let correct = corpus
            .iter()
            .filter(|seq| {
                let p = bayes_oracle_prob(&s, &seq.tokens);
                (p > 0.5) == (seq.label == 1)
            })
            .count();
        let acc = correct as f64 / corpus.len() as f64;
        assert!((acc - 0.5).abs() <= 0.05, "accuracy {acc}");
    }

    #[test]
    fn oracle_neutral_tokens_are_uninformative() {
        let s = spec();
        let neutral = s.neutral();
        let seq = vec![neutral[0], neutral[3], neutral[5]];
        assert!((bayes_oracle_prob(&s, &seq) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn oracle_single_class_token_matches_hand_derivation() {
        let s = spec();
        let t = s.s1[0];
        // p(t|1) = beta/|S1|, p(t|0) = (1-beta)/(V - |S0|)
        let p1 = s.beta / s.s1.len() as f64;
        let p0 = (1.0 - s.beta) / (62 - s.s0.len()) as f64;
        let expect = p1 / (p1 + p0);
        assert!((bayes_oracle_prob(&s, &[t]) - expect).abs() < 1e-12);
    }

    #[test]
    fn oracle_is_monotone_in_class_tokens() {
        let s = spec();
        let mut seq = vec![s.neutral()[0], s.s0[0]];
        let mut prev = bayes_oracle_prob(&s, &seq);
        for i in 0..5 {
            seq.push(s.s1[i]);
            let p = bayes_oracle_prob(&s, &seq);
            assert!(p >= prev);
            prev = p;
        }
    }

    #[test]
    fn oracle_calibration_on_class_one() {
        let s = spec();
        let corpus = synth_corpus(&s, 2500).unwrap();
        let mean: f64 = corpus
            .iter()
            .filter(|seq| seq.label == 1)
            .map(|seq| bayes_oracle_prob(&s, &seq.tokens))
            .sum::<f64>()
            / 2500.0;
        assert!(mean > 0.9, "mean class-1 posterior {mean}");
    }

    #[test]
    fn empirical_frequencies_match_emission_distribution() {
        let s = spec();
        let corpus = synth_corpus(&s, 2000).unwrap();
        let mut counts = vec![0usize; s.vocab_size];
        let mut total = 0usize;
        for seq in corpus.iter().filter(|seq| seq.label == 1) {
            for &t in &seq.tokens {
                counts[t] += 1;
                total += 1;
            }
        }
        for &t in s.s1.iter().chain(s.neutral().iter()) {
            let p = s.emission_prob(t, 1);
            let sigma = (p * (1.0 - p) / total as f64).sqrt();
            let obs = counts[t] as f64 / total as f64;
            assert!(
                (obs - p).abs() <= 3.0 * sigma + 1e-9,
                "token {t}: obs {obs} vs {p} (sigma {sigma})"
            );
        }
    }

    #[test]
    fn jsonl_roundtrip_and_split() {
        let s = spec();
        let vocab = s.vocabulary().unwrap();
        let corpus = synth_corpus(&s, 50).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.jsonl");
        let meta = serde_json::json!({"spec": &s});
        save_jsonl(&path, &corpus, &vocab, Some(&meta)).unwrap();
        let loaded = load_jsonl(&path, &vocab).unwrap();
        assert_eq!(loaded, corpus);
        assert!(read_jsonl_meta(&path).unwrap().is_some());

        let (train, test) = split(&corpus, 0.8, 3);
        assert_eq!(train.len(), 80);
        assert_eq!(test.len(), 20);
        let mut merged: Vec<&LabeledSequence> = train.iter().chain(test.iter()).collect();
        merged.sort_by_key(|s| (s.tokens.clone(), s.label));
        let mut orig: Vec<&LabeledSequence> = corpus.iter().collect();
        orig.sort_by_key(|s| (s.tokens.clone(), s.label));
        assert_eq!(merged, orig);
    }

    #[test]
    fn empty_file_loads_empty() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.jsonl");
        fs::write(&path, "").unwrap();
        let vocab = Vocabulary::synthetic(8).unwrap();
        assert!(load_jsonl(&path, &vocab).unwrap().is_empty());
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.jsonl");
        fs::write(&path, "{\"tokens\": [\"w02\"], \"label\": 1, \"attribute\": \"a\"}\nnot json\n").unwrap();
        let vocab = Vocabulary::synthetic(8).unwrap();
        match load_jsonl(&path, &vocab) {
            Err(Error::MalformedCorpus { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected malformed-corpus error, got {other:?}"),
        }
    }

    #[test]
    fn unknown_token_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("u.jsonl");
        fs::write(&path, "{\"tokens\": [\"zz\"], \"label\": 0, \"attribute\": \"a\"}\n").unwrap();
        let vocab = Vocabulary::synthetic(8).unwrap();
        assert!(matches!(
            load_jsonl(&path, &vocab),
            Err(Error::UnknownToken(_))
        ));
    }
}
