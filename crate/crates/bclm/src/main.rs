//! Command-line front end: corpus generation, backbone and discriminator
//! training, guided generation, stepwise traces, evaluation, and the decode
//! benchmark. All structured I/O is JSON; every output artifact embeds the
//! effective configuration and the content hashes of its inputs. Failures
//! print one machine-parseable line: `error[<category>]: <message>`.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use bclm::backbone::{train_backbone, BackboneTrainConfig, TokenId, Vocabulary};
use bclm::checkpoint::{
    backbone_file_hash, fnv1a64, load_backbone, load_discriminator, save_backbone,
    save_discriminator,
};
use bclm::corpus::{load_jsonl, save_jsonl, synth_corpus, SynthSpec};
use bclm::disc::DiscriminatorParams;
use bclm::error::Error;
use bclm::metrics::{self, BenchMode, HeadJudge, OracleJudge};
use bclm::sampling::{check_head_compat, Mode, Sampler, SamplerConfig, TraceHead};
use bclm::training::{train_discriminator, TrainConfig};

#[derive(Parser)]
#[command(
    name = "bclm",
    about = "Attribute-controlled text generation with twin discriminator heads over a frozen backbone LM",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a labeled synthetic corpus from a spec file.
    GenCorpus(GenCorpusArgs),
    /// Train the frozen backbone language model.
    TrainBackbone(TrainBackboneArgs),
    /// Train twin attribute discriminators against a frozen backbone.
    TrainDisc(TrainDiscArgs),
    /// Generate samples with attribute-guided decoding.
    Generate(GenerateArgs),
    /// Print stepwise attribute probabilities for a token sequence.
    Trace(TraceArgs),
    /// Evaluate a sample file with an oracle or discriminator judge.
    Eval(EvalArgs),
    /// Benchmark decode cost per token in faster vs naive mode.
    Bench(BenchArgs),
}

/// Spec file for `gen-corpus`; unknown keys are rejected.
#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CorpusSpecFile {
    attribute: String,
    #[serde(default = "default_vocab_size")]
    vocab_size: usize,
    #[serde(default = "default_beta")]
    beta: f64,
    #[serde(default = "default_t_min")]
    t_min: usize,
    #[serde(default = "default_t_max")]
    t_max: usize,
    #[serde(default)]
    seed: u64,
    #[serde(default = "default_n_per_class")]
    n_per_class: usize,
}

fn default_vocab_size() -> usize {
    64
}
fn default_beta() -> f64 {
    0.7
}
fn default_t_min() -> usize {
    8
}
fn default_t_max() -> usize {
    32
}
fn default_n_per_class() -> usize {
    1000
}

#[derive(Args)]
struct GenCorpusArgs {
    /// JSON spec: {attribute, vocab_size, beta, t_min, t_max, seed, n_per_class}
    #[arg(long)]
    spec: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Override the spec file's seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the spec file's sample count per class.
    #[arg(long)]
    n_per_class: Option<usize>,
}

#[derive(Args)]
struct TrainBackboneArgs {
    #[arg(long)]
    corpus: PathBuf,
    /// Vocabulary file (newline-delimited); defaults to `<corpus>.vocab`.
    #[arg(long)]
    vocab: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value = "32")]
    d_h: usize,
    #[arg(long, default_value = "16")]
    d_e: usize,
    #[arg(long, default_value = "40")]
    epochs: usize,
    #[arg(long, default_value = "0.15")]
    lr: f64,
    #[arg(long, default_value = "0")]
    seed: u64,
}

#[derive(Args)]
struct TrainDiscArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    backbone: PathBuf,
    #[arg(long)]
    attribute: String,
    #[arg(long)]
    out: PathBuf,
    /// Drop the normal head and the distillation loss; train the faster
    /// head on its own cross-entropy.
    #[arg(long)]
    no_kd: bool,
    #[arg(long, default_value = "200")]
    epochs: usize,
    #[arg(long, default_value = "5e-5")]
    lr: f64,
    #[arg(long, default_value = "64")]
    batch_size: usize,
    #[arg(long, default_value = "0")]
    seed: u64,
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long)]
    backbone: PathBuf,
    /// Discriminator checkpoint; repeat for multi-attribute control.
    #[arg(long)]
    disc: Vec<PathBuf>,
    #[arg(long, default_value = "")]
    prefix: String,
    #[arg(long, default_value = "10")]
    num: usize,
    #[arg(long, default_value = "5.0")]
    lambda: f64,
    #[arg(long, default_value = "0.9")]
    rho1: f64,
    #[arg(long, default_value = "0.3")]
    rho2: f64,
    #[arg(long, default_value = "40")]
    max_len: usize,
    /// gemini | no-ad | uncond
    #[arg(long, default_value = "gemini")]
    mode: String,
    /// Record per-step probabilities and filter membership per sample.
    #[arg(long)]
    trace: bool,
    #[arg(long, default_value = "0")]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TraceArgs {
    #[arg(long)]
    backbone: PathBuf,
    #[arg(long)]
    disc: PathBuf,
    /// Whitespace-separated tokens to trace.
    #[arg(long)]
    tokens: String,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    samples: PathBuf,
    /// `oracle` (requires --spec) or a discriminator checkpoint path.
    #[arg(long)]
    judge: String,
    #[arg(long)]
    backbone: PathBuf,
    /// Corpus spec file, needed for the oracle judge.
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long, default_value = "0")]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long)]
    backbone: PathBuf,
    #[arg(long)]
    disc: PathBuf,
    /// faster | naive
    #[arg(long, default_value = "faster")]
    mode: String,
    #[arg(long, default_value = "100")]
    num: usize,
    #[arg(long, default_value = "40")]
    max_len: usize,
    #[arg(long, default_value = "0")]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenCorpus(a) => cmd_gen_corpus(a),
        Command::TrainBackbone(a) => cmd_train_backbone(a),
        Command::TrainDisc(a) => cmd_train_disc(a),
        Command::Generate(a) => cmd_generate(a),
        Command::Trace(a) => cmd_trace(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Bench(a) => cmd_bench(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error[{}]: {}", e.category(), e);
            ExitCode::FAILURE
        }
    }
}

fn read_spec_file(path: &Path) -> Result<CorpusSpecFile, Error> {
    if !path.exists() {
        return Err(Error::MissingFile(path.display().to_string()));
    }
    let text = fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| Error::BadConfig(format!("{}: {e}", path.display())))
}

fn build_spec(file: &CorpusSpecFile) -> Result<SynthSpec, Error> {
    SynthSpec::generate(
        &file.attribute,
        file.vocab_size,
        file.beta,
        file.t_min,
        file.t_max,
        file.seed,
    )
}

fn vocab_sidecar_path(corpus: &Path) -> PathBuf {
    let mut p = corpus.as_os_str().to_owned();
    p.push(".vocab");
    PathBuf::from(p)
}

fn save_vocab(path: &Path, vocab: &Vocabulary) -> Result<(), Error> {
    fs::write(path, vocab.tokens().join("\n"))?;
    Ok(())
}

fn load_vocab(path: &Path) -> Result<Vocabulary, Error> {
    if !path.exists() {
        return Err(Error::MissingFile(path.display().to_string()));
    }
    let text = fs::read_to_string(path)?;
    Vocabulary::new(text.lines().map(str::to_string).collect())
}

fn file_hash(path: &Path) -> Result<u64, Error> {
    if !path.exists() {
        return Err(Error::MissingFile(path.display().to_string()));
    }
    Ok(fnv1a64(&fs::read(path)?))
}

fn cmd_gen_corpus(args: GenCorpusArgs) -> Result<(), Error> {
    let mut spec_file = read_spec_file(&args.spec)?;
    if let Some(seed) = args.seed {
        spec_file.seed = seed;
    }
    if let Some(n) = args.n_per_class {
        spec_file.n_per_class = n;
    }
    let spec = build_spec(&spec_file)?;
    let corpus = synth_corpus(&spec, spec_file.n_per_class)?;
    let vocab = spec.vocabulary()?;
    let meta = serde_json::json!({
        "command": "gen-corpus",
        "config": spec_file,
        "spec": spec,
    });
    save_jsonl(&args.out, &corpus, &vocab, Some(&meta))?;
    save_vocab(&vocab_sidecar_path(&args.out), &vocab)?;
    eprintln!(
        "wrote {} sequences to {} (vocab sidecar {})",
        corpus.len(),
        args.out.display(),
        vocab_sidecar_path(&args.out).display()
    );
    Ok(())
}

fn cmd_train_backbone(args: TrainBackboneArgs) -> Result<(), Error> {
    let vocab_path = args
        .vocab
        .clone()
        .unwrap_or_else(|| vocab_sidecar_path(&args.corpus));
    let vocab = load_vocab(&vocab_path)?;
    let corpus = load_jsonl(&args.corpus, &vocab)?;
    if corpus.is_empty() {
        return Err(Error::BadConfig("corpus has no sequences".into()));
    }
    let sequences: Vec<Vec<TokenId>> = corpus.into_iter().map(|s| s.tokens).collect();
    let cfg = BackboneTrainConfig {
        d_h: args.d_h,
        d_e: args.d_e,
        epochs: args.epochs,
        lr: args.lr,
        seed: args.seed,
    };
    let (model, report) = train_backbone(vocab, &sequences, &cfg)?;
    for (epoch, nll) in report.epoch_nll.iter().enumerate() {
        println!("{}", serde_json::json!({ "epoch": epoch, "nll": nll }));
    }
    save_backbone(&args.out, &model)?;
    eprintln!("wrote backbone checkpoint to {}", args.out.display());
    Ok(())
}

fn cmd_train_disc(args: TrainDiscArgs) -> Result<(), Error> {
    let backbone = load_backbone(&args.backbone)?;
    let corpus = load_jsonl(&args.corpus, backbone.vocab())?;
    let cfg = TrainConfig {
        lr: args.lr,
        batch_size: args.batch_size,
        epochs: args.epochs,
        seed: args.seed,
        kd_enabled: !args.no_kd,
        ..TrainConfig::default()
    };
    let (params, log) = train_discriminator(&corpus, &backbone, &args.attribute, &cfg)?;
    for entry in &log {
        println!("{}", serde_json::to_string(entry).expect("serializable"));
    }
    let hash = backbone_file_hash(&args.backbone)?;
    save_discriminator(&args.out, &params, hash)?;
    eprintln!("wrote discriminator checkpoint to {}", args.out.display());
    Ok(())
}

fn parse_mode(s: &str) -> Result<Mode, Error> {
    match s {
        "gemini" => Ok(Mode::Gemini),
        "no-ad" => Ok(Mode::NoAd),
        "uncond" => Ok(Mode::Uncond),
        other => Err(Error::BadConfig(format!(
            "unknown mode {other:?} (expected gemini, no-ad, or uncond)"
        ))),
    }
}

/// Load discriminators and verify each was trained against the given
/// backbone file.
fn load_heads(
    disc_paths: &[PathBuf],
    backbone_path: &Path,
) -> Result<Vec<(DiscriminatorParams, u64)>, Error> {
    let bb_hash = backbone_file_hash(backbone_path)?;
    let mut heads = Vec::with_capacity(disc_paths.len());
    for p in disc_paths {
        let (params, hash) = load_discriminator(p)?;
        heads.push((params, hash));
    }
    let named: Vec<(String, u64)> = heads
        .iter()
        .map(|(p, h)| (p.attribute.clone(), *h))
        .collect();
    check_head_compat(bb_hash, &named)?;
    Ok(heads)
}

fn cmd_generate(args: GenerateArgs) -> Result<(), Error> {
    let mode = parse_mode(&args.mode)?;
    let backbone = load_backbone(&args.backbone)?;
    let heads = if mode == Mode::Uncond {
        Vec::new()
    } else {
        load_heads(&args.disc, &args.backbone)?
    };
    let prefix = backbone.vocab().encode(&args.prefix)?;
    let cfg = SamplerConfig {
        lambda: args.lambda,
        rho1: args.rho1,
        rho2: args.rho2,
        max_len: args.max_len,
        seed: args.seed,
        mode,
        allow_eos: true,
    };
    let head_refs: Vec<&DiscriminatorParams> = heads.iter().map(|(p, _)| p).collect();
    let sampler = Sampler::new(&backbone, &head_refs, cfg.clone())?;

    let mut f = fs::File::create(&args.out)?;
    if args.num == 0 {
        eprintln!("wrote 0 samples to {}", args.out.display());
        return Ok(());
    }
    let meta = serde_json::json!({
        "command": "generate",
        "config": cfg,
        "prefix": args.prefix,
        "num": args.num,
        "inputs": {
            "backbone": args.backbone.display().to_string(),
            "backbone_hash": format!("{:#018x}", backbone_file_hash(&args.backbone)?),
            "discs": args.disc.iter().map(|p| p.display().to_string()).collect::<Vec<_>>(),
            "disc_hashes": args.disc.iter()
                .map(|p| file_hash(p).map(|h| format!("{h:#018x}")))
                .collect::<Result<Vec<_>, Error>>()?,
        },
        "attributes": head_refs.iter().map(|p| p.attribute.clone()).collect::<Vec<_>>(),
    });
    writeln!(f, "{}", serde_json::json!({ "_meta": meta }))?;

    for stream in 0..args.num {
        let out = sampler.generate(&prefix, stream as u64);
        let tokens: Vec<String> = out
            .tokens
            .iter()
            .map(|&t| backbone.vocab().token(t).to_string())
            .collect();
        let mut record = serde_json::json!({
            "prefix": args.prefix,
            "tokens": tokens,
            "text": out.tokens.iter().map(|&t| backbone.vocab().token(t)).collect::<Vec<_>>().join(" "),
        });
        if args.trace {
            let per_step: Vec<serde_json::Value> = out
                .trace
                .iter()
                .map(|s| {
                    serde_json::json!({
                        "token": backbone.vocab().token(s.token),
                        "p_uncond": s.p_uncond,
                        "p_f": s.p_f,
                        "in_Vk": s.in_vk,
                        "in_Um": s.in_um,
                    })
                })
                .collect();
            record["per_step"] = serde_json::Value::Array(per_step);
        }
        writeln!(f, "{record}")?;
    }
    eprintln!("wrote {} samples to {}", args.num, args.out.display());
    Ok(())
}

fn cmd_trace(args: TraceArgs) -> Result<(), Error> {
    let backbone = load_backbone(&args.backbone)?;
    let heads = load_heads(&[args.disc.clone()], &args.backbone)?;
    let params = &heads[0].0;
    let tokens = backbone.vocab().encode(&args.tokens)?;
    if tokens.len() < 2 {
        return Err(Error::BadConfig("trace needs at least two tokens".into()));
    }
    let faster = bclm::sampling::stepwise_trace(&backbone, params, &tokens, TraceHead::Faster);
    let normal = bclm::sampling::stepwise_trace(&backbone, params, &tokens, TraceHead::Normal);

    let header: Vec<String> = tokens
        .iter()
        .map(|&t| backbone.vocab().token(t).to_string())
        .collect();
    let fmt_row = |name: &str, vals: &[f64]| {
        let mut cells = vec!["-".to_string()];
        cells.extend(vals.iter().map(|v| format!("{v:.3}")));
        let mut line = format!("{name:<22}");
        for c in &cells {
            line.push_str(&format!("{c:>8}"));
        }
        line
    };
    let mut head_line = format!("{:<22}", format!("attribute: {}", params.attribute));
    for h in &header {
        head_line.push_str(&format!("{h:>8}"));
    }
    println!("{head_line}");
    println!("{}", fmt_row("faster head p_f", &faster));
    println!("{}", fmt_row("normal head p_n", &normal));
    Ok(())
}

/// Read the `tokens` arrays out of a samples JSON-lines file.
fn load_samples(path: &Path, vocab: &Vocabulary) -> Result<Vec<Vec<TokenId>>, Error> {
    if !path.exists() {
        return Err(Error::MissingFile(path.display().to_string()));
    }
    #[derive(Deserialize)]
    struct SampleRecord {
        tokens: Vec<String>,
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
        let rec: SampleRecord =
            serde_json::from_str(trimmed).map_err(|e| Error::MalformedCorpus {
                line: lineno + 1,
                msg: e.to_string(),
            })?;
        let tokens = rec
            .tokens
            .iter()
            .map(|t| vocab.id(t).ok_or_else(|| Error::UnknownToken(t.clone())))
            .collect::<Result<Vec<_>, Error>>()?;
        if !tokens.is_empty() {
            out.push(tokens);
        }
    }
    Ok(out)
}

fn cmd_eval(args: EvalArgs) -> Result<(), Error> {
    let backbone = load_backbone(&args.backbone)?;
    let samples = load_samples(&args.samples, backbone.vocab())?;
    let config = serde_json::json!({
        "command": "eval",
        "judge": args.judge,
        "seed": args.seed,
        "inputs": {
            "samples": args.samples.display().to_string(),
            "samples_hash": format!("{:#018x}", file_hash(&args.samples)?),
            "backbone": args.backbone.display().to_string(),
            "backbone_hash": format!("{:#018x}", backbone_file_hash(&args.backbone)?),
        },
    });

    let report = if args.judge == "oracle" {
        let spec_path = args.spec.as_ref().ok_or_else(|| {
            Error::BadConfig("--judge oracle requires --spec <corpus spec file>".into())
        })?;
        let spec = build_spec(&read_spec_file(spec_path)?)?;
        let judge = OracleJudge(&spec);
        metrics::evaluate(&samples, &judge, &backbone, args.seed, config)?
    } else {
        let disc_path = PathBuf::from(&args.judge);
        let heads = load_heads(&[disc_path], &args.backbone)?;
        let judge = HeadJudge {
            backbone: &backbone,
            params: &heads[0].0,
        };
        metrics::evaluate(&samples, &judge, &backbone, args.seed, config)?
    };
    fs::write(
        &args.out,
        serde_json::to_string_pretty(&report).expect("serializable"),
    )?;
    eprintln!("wrote evaluation report to {}", args.out.display());
    Ok(())
}

fn cmd_bench(args: BenchArgs) -> Result<(), Error> {
    let mode = match args.mode.as_str() {
        "faster" => BenchMode::Faster,
        "naive" => BenchMode::NaiveNormal,
        other => {
            return Err(Error::BadConfig(format!(
                "unknown bench mode {other:?} (expected faster or naive)"
            )))
        }
    };
    let backbone = load_backbone(&args.backbone)?;
    let heads = load_heads(&[args.disc.clone()], &args.backbone)?;
    let result = metrics::bench_time_per_token(
        &backbone,
        &heads[0].0,
        args.num,
        mode,
        args.seed,
        args.max_len,
    );
    let meta = serde_json::json!({
        "command": "bench",
        "mode": args.mode,
        "num": args.num,
        "max_len": args.max_len,
        "seed": args.seed,
        "inputs": {
            "backbone": args.backbone.display().to_string(),
            "backbone_hash": format!("{:#018x}", backbone_file_hash(&args.backbone)?),
            "disc": args.disc.display().to_string(),
        },
    });
    let mut out = String::new();
    out.push_str(&format!("# {meta}\n"));
    out.push_str("mode,n,mean_s,std_s,forwards\n");
    out.push_str(&format!(
        "{},{},{},{},{}\n",
        args.mode, result.n_samples, result.mean_s, result.std_s, result.backbone_forwards
    ));
    fs::write(&args.out, out)?;
    eprintln!(
        "bench {}: {:.6}s/token (std {:.6}), {} forwards",
        args.mode, result.mean_s, result.std_s, result.backbone_forwards
    );
    Ok(())
}
