// SPDX-License-Identifier: MIT OR Apache-2.0

//! `asc`: corpus building, training, intervention sweeps, bound checks and
//! generation for the attention short-circuiting laboratory.

mod manifest;

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{ArgMatches, Args, CommandFactory, FromArgMatches, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use asc_core::bounds::{self, Activation, TrialDims};
use asc_core::checkpoint::{load_checkpoint, save_checkpoint};
use asc_core::corpus::{build_corpus, BackgroundGenerator, CanaryPreset, Corpus, CorpusSpec};
use asc_core::harness::{self, InductionConfig, SweepData, SweepPlan};
use asc_core::metrics::PerplexityWindow;
use asc_core::model::{greedy_generate, sample_generate, InterventionSpec, ModelConfig};
use asc_core::seed::derive_seed;
use asc_core::trainer::{train_with_progress, write_loss_csv, TrainConfig};
use asc_core::AscError;

use manifest::{resolve, ManifestBuilder, MANIFEST_FILE};

const EXIT_USAGE: u8 = 1;
const EXIT_RUNTIME: u8 = 2;
const EXIT_VIOLATION: u8 = 3;

#[derive(Parser, Debug)]
#[command(name = "asc", version, about = "Attention short-circuiting laboratory")]
struct Cli {
    /// Cap on parallel workers (default: machine parallelism).
    #[arg(long, global = true, env = "ASC_WORKERS")]
    workers: Option<usize>,
    /// JSON file of option values (or a run manifest to replay); flags given
    /// on the command line take precedence.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Build a synthetic corpus with planted canaries.
    Corpus(CorpusArgs),
    /// Train a model on a corpus.
    Train(TrainArgs),
    /// Evaluate attention short-circuit interventions.
    Sweep(SweepArgs),
    /// Merge sweeps of differently sized models on normalized depth.
    Scale(ScaleArgs),
    /// Check the output-difference bounds on random theorem blocks.
    Bounds(BoundsArgs),
    /// Generate continuations from a checkpoint.
    Generate(GenerateArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
enum Preset {
    PythiaStyle,
    NeoStyle,
}

impl From<Preset> for CanaryPreset {
    fn from(p: Preset) -> Self {
        match p {
            Preset::PythiaStyle => CanaryPreset::PythiaStyle,
            Preset::NeoStyle => CanaryPreset::NeoStyle,
        }
    }
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
struct CorpusArgs {
    /// Canary prefix/suffix lengths: pythia-style (32,32) or neo-style (150,50).
    #[arg(long, value_enum, default_value_t = Preset::PythiaStyle)]
    preset: Preset,
    #[arg(long, default_value_t = 512)]
    vocab: usize,
    #[arg(long, default_value_t = 64)]
    canaries: usize,
    /// Times each canary is planted.
    #[arg(long, default_value_t = 200)]
    reps: usize,
    /// Negative-control canaries (default: same as --canaries).
    #[arg(long)]
    controls: Option<usize>,
    #[arg(long, default_value_t = 1 << 20)]
    background_tokens: usize,
    #[arg(long, default_value_t = 1 << 14)]
    heldout_tokens: usize,
    /// Markov order of the background; 0 gives uniform random tokens.
    #[arg(long, default_value_t = 2)]
    markov_order: usize,
    /// Per-token probability of a repeat episode (random segment, gap, same segment) in the training stream.
    #[arg(long, default_value_t = 0.01)]
    repeat_rate: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
struct TrainArgs {
    /// Corpus directory written by `asc corpus`.
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long, default_value_t = 8)]
    layers: usize,
    #[arg(long, default_value_t = 4)]
    heads: usize,
    #[arg(long, default_value_t = 128)]
    dmodel: usize,
    #[arg(long, default_value_t = 512)]
    dff: usize,
    #[arg(long, default_value_t = 128)]
    max_seq_len: usize,
    #[arg(long, default_value_t = 6000)]
    steps: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[arg(long, default_value_t = 8)]
    batch: usize,
    #[arg(long, default_value_t = 128)]
    seq_len: usize,
    #[arg(long, default_value_t = 100)]
    warmup: usize,
    /// Learning rate at the last step as a fraction of --lr (linear decay after warmup).
    #[arg(long, default_value_t = 0.1)]
    final_lr_ratio: f64,
    #[arg(long, default_value_t = 1.0)]
    clip: f64,
    /// Steps between canary/held-out loss evaluations (0 = never).
    #[arg(long, default_value_t = 25)]
    eval_interval: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Checkpoint path; the loss CSV and manifest are written beside it.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
enum SweepMode {
    PerLayer,
    Quartile,
    Custom,
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
struct SweepArgs {
    #[arg(long)]
    ckpt: Option<PathBuf>,
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = SweepMode::PerLayer)]
    mode: SweepMode,
    /// Layers short-circuited together (custom mode only), e.g. `0,3`.
    #[arg(long)]
    layers: Option<String>,
    #[arg(long, default_value_t = 128)]
    ppl_window: usize,
    #[arg(long, default_value_t = 64)]
    ppl_stride: usize,
    #[arg(long, default_value_t = 256)]
    probes: usize,
    /// Distinct tokens in each induction probe before the repeated key.
    #[arg(long, default_value_t = 48)]
    probe_body: usize,
    #[arg(long, default_value_t = 3)]
    probe_key: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
struct ScaleArgs {
    /// `LABEL=DIR` of a sweep output directory; give at least two.
    #[arg(long = "sweep")]
    sweeps: Vec<String>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
enum ActivationArg {
    Identity,
    Gelu,
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
struct BoundsArgs {
    #[arg(long, default_value_t = 1000)]
    trials: usize,
    /// Largest sequence length.
    #[arg(long, default_value_t = 8)]
    max_n: usize,
    /// Largest width.
    #[arg(long, default_value_t = 16)]
    max_d: usize,
    /// Largest spectral norm of the FFN's linear part.
    #[arg(long, default_value_t = 3.0)]
    max_w_norm: f64,
    #[arg(long, value_enum, default_value_t = ActivationArg::Identity)]
    activation: ActivationArg,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
struct GenerateArgs {
    #[arg(long)]
    ckpt: Option<PathBuf>,
    /// Comma-separated token ids.
    #[arg(long, default_value = "")]
    prefix: String,
    /// Tokens to generate.
    #[arg(long, default_value_t = 16)]
    n: usize,
    /// Layers to short-circuit, e.g. `0,1`.
    #[arg(long)]
    short_circuit: Option<String>,
    /// Sample at this temperature instead of greedy decoding.
    #[arg(long)]
    temperature: Option<f64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Also print the vanilla continuation next to the short-circuited one.
    #[arg(long, default_value_t = false)]
    compare: bool,
    /// Optional JSON output file; a manifest is written beside it.
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Usage problems detected after parsing.
#[derive(Debug)]
struct UsageError(String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

/// Result of a command that can also report a violated check.
enum Outcome {
    Ok,
    Violation,
}

/// Parses `"1, 2,3"`; errors name the character offset of the bad item.
fn parse_id_list(s: &str, what: &str) -> Result<Vec<u32>> {
    if s.trim().is_empty() {
        return Ok(Vec::new());
    }
    let mut out = Vec::new();
    let mut offset = 0;
    for item in s.split(',') {
        let lead = item.len() - item.trim_start().len();
        out.push(
            item.trim()
                .parse::<u32>()
                .map_err(|_| usage(format!("{what}: cannot parse {:?} at offset {}", item.trim(), offset + lead)))?,
        );
        offset += item.len() + 1;
    }
    Ok(out)
}

fn required<'a>(v: &'a Option<PathBuf>, flag: &str) -> Result<&'a PathBuf> {
    v.as_ref().ok_or_else(|| usage(format!("missing required option --{flag}")))
}

/// Model config fields to the flags that set them.
fn flag_for(field: &str) -> &str {
    match field {
        "n_layers" => "--layers",
        "n_heads" => "--heads",
        "d_model" => "--dmodel",
        "d_ff" => "--dff",
        "vocab_size" => "--vocab",
        "max_seq_len" => "--max-seq-len",
        "learning_rate" => "--lr",
        "batch_size" => "--batch",
        "seq_len" => "--seq-len",
        "grad_clip_norm" => "--clip",
        "warmup_steps" => "--warmup",
        "final_lr_ratio" => "--final-lr-ratio",
        "n_canaries" => "--canaries",
        "canary_repetitions" => "--reps",
        "order" => "--markov-order",
        "repeat_rate" => "--repeat-rate",
        other => other,
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<UsageError>().is_some() {
        return EXIT_USAGE;
    }
    match err.downcast_ref::<AscError>() {
        Some(AscError::Config { .. } | AscError::Input(_) | AscError::Plan(_)) => EXIT_USAGE,
        _ => EXIT_RUNTIME,
    }
}

fn describe(err: &anyhow::Error) -> String {
    if let Some(AscError::Config { fields, message }) = err.downcast_ref::<AscError>() {
        let flags: Vec<&str> = fields.iter().map(|f| flag_for(f)).collect();
        return format!("invalid configuration ({}): {message}", flags.join(", "));
    }
    format!("{err:#}")
}

fn main() -> ExitCode {
    let matches = match Cli::command().try_get_matches() {
        Ok(m) => m,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { EXIT_USAGE } else { 0 });
        }
    };
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(EXIT_USAGE);
        }
    };
    if let Some(n) = cli.workers {
        if n == 0 {
            eprintln!("error: --workers must be at least 1");
            return ExitCode::from(EXIT_USAGE);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(EXIT_RUNTIME);
        }
    }
    let (_, sub) = matches.subcommand().expect("subcommand is required");
    match run(cli.command, sub, cli.config.as_deref()) {
        Ok(Outcome::Ok) => ExitCode::SUCCESS,
        Ok(Outcome::Violation) => ExitCode::from(EXIT_VIOLATION),
        Err(e) => {
            eprintln!("error: {}", describe(&e));
            ExitCode::from(exit_code(&e))
        }
    }
}

fn run(command: Command, sub: &ArgMatches, config: Option<&Path>) -> Result<Outcome> {
    fn with_config<T: Serialize + serde::de::DeserializeOwned>(a: T, sub: &ArgMatches, config: Option<&Path>) -> Result<T> {
        resolve(a, sub, config).map_err(|e| usage(format!("{e:#}")))
    }
    match command {
        Command::Corpus(a) => cmd_corpus(with_config(a, sub, config)?),
        Command::Train(a) => cmd_train(with_config(a, sub, config)?),
        Command::Sweep(a) => cmd_sweep(with_config(a, sub, config)?),
        Command::Scale(a) => cmd_scale(with_config(a, sub, config)?),
        Command::Bounds(a) => cmd_bounds(with_config(a, sub, config)?),
        Command::Generate(a) => cmd_generate(with_config(a, sub, config)?),
    }
}

fn cmd_corpus(a: CorpusArgs) -> Result<Outcome> {
    let out = required(&a.out, "out")?.clone();
    let mb = ManifestBuilder::start("corpus", &a, a.seed)?;
    let mut spec = CorpusSpec::from_preset(a.preset.into(), a.vocab, a.canaries, a.reps, a.seed);
    spec.background = match a.markov_order {
        0 => BackgroundGenerator::UniformRandom {
            seed: derive_seed(a.seed, "background"),
        },
        order => BackgroundGenerator::MarkovChain {
            order,
            seed: derive_seed(a.seed, "background"),
        },
    };
    spec.background_tokens = a.background_tokens;
    spec.heldout_tokens = a.heldout_tokens;
    spec.n_controls = a.controls.unwrap_or(a.canaries);
    spec.repeat_rate = a.repeat_rate;
    let corpus = build_corpus(&spec)?;
    corpus.save(&out)?;
    mb.finish(&[], &[out.clone()], &out.join(MANIFEST_FILE))?;
    println!(
        "corpus: {} training tokens, {} held-out tokens, {} canaries x {} reps, {} controls -> {}",
        corpus.train.len(),
        corpus.heldout.len(),
        corpus.canaries.len(),
        a.reps,
        corpus.controls.len(),
        out.display()
    );
    Ok(Outcome::Ok)
}

fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn cmd_train(a: TrainArgs) -> Result<Outcome> {
    let corpus_dir = required(&a.corpus, "corpus")?;
    let out = required(&a.out, "out")?.clone();
    let mb = ManifestBuilder::start("train", &a, a.seed)?;
    let corpus = Corpus::load(corpus_dir)?;
    let cfg = ModelConfig {
        n_layers: a.layers,
        n_heads: a.heads,
        d_model: a.dmodel,
        d_ff: a.dff,
        vocab_size: corpus.spec.vocab_size,
        max_seq_len: a.max_seq_len,
        layer_norm_eps: 1e-5,
    };
    let tcfg = TrainConfig {
        learning_rate: a.lr,
        batch_size: a.batch,
        steps: a.steps,
        seq_len: a.seq_len,
        grad_clip_norm: a.clip,
        warmup_steps: a.warmup,
        final_lr_ratio: a.final_lr_ratio,
        eval_interval: a.eval_interval,
        rng_seed: a.seed,
        ..TrainConfig::default()
    };
    let outcome = train_with_progress(&cfg, &tcfg, &corpus, |r| {
        if let (Some(c), Some(h)) = (r.canary_loss, r.heldout_loss) {
            eprintln!("step {:>6}  train {:.4}  canary {:.4}  heldout {:.4}", r.step + 1, r.train_loss, c, h);
        }
    })?;
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    save_checkpoint(&out, &cfg, &outcome.weights)?;
    let loss_path = sibling(&out, ".loss.csv");
    let mut w = BufWriter::new(File::create(&loss_path)?);
    write_loss_csv(&mut w, &outcome.history)?;
    w.flush()?;
    mb.finish(
        &[corpus_dir.clone()],
        &[out.clone(), loss_path],
        &sibling(&out, ".manifest.json"),
    )?;
    println!("checkpoint: {} ({} parameters)", out.display(), cfg.n_params());
    Ok(Outcome::Ok)
}

fn cmd_sweep(a: SweepArgs) -> Result<Outcome> {
    let ckpt = required(&a.ckpt, "ckpt")?;
    let corpus_dir = required(&a.corpus, "corpus")?;
    let out = required(&a.out, "out")?.clone();
    if a.layers.is_some() && a.mode != SweepMode::Custom {
        return Err(usage("--layers is only valid with --mode custom"));
    }
    let mb = ManifestBuilder::start("sweep", &a, a.seed)?;
    let data = SweepData::load(ckpt, corpus_dir)?;
    let l = data.cfg.n_layers;
    let mut plan = match a.mode {
        SweepMode::PerLayer => SweepPlan::per_layer(l)?,
        SweepMode::Quartile => SweepPlan::quartile(l)?,
        SweepMode::Custom => {
            let raw = a.layers.as_deref().ok_or_else(|| usage("--mode custom requires --layers"))?;
            let layers = parse_id_list(raw, "--layers")?;
            if layers.is_empty() {
                return Err(usage("--layers must name at least one layer"));
            }
            SweepPlan::new(vec![InterventionSpec::new(layers.into_iter().map(|v| v as usize), l)?])
        }
    };
    plan.perplexity = PerplexityWindow {
        window: a.ppl_window,
        stride: a.ppl_stride,
    };
    plan.induction = InductionConfig {
        n_probes: a.probes,
        body_len: a.probe_body,
        key_len: a.probe_key,
    };
    plan.seed = a.seed;
    let result = harness::run_sweep(&plan, &data)?;
    harness::write_sweep(&out, &result)?;
    let drops = out.join("relative_drop.csv");
    let mut w = BufWriter::new(File::create(&drops)?);
    harness::write_relative_drop_csv(&mut w, &result)?;
    w.flush()?;
    mb.finish(&[ckpt.clone(), corpus_dir.clone()], &[out.clone()], &out.join(MANIFEST_FILE))?;
    harness::write_sweep_csv(std::io::stdout().lock(), &result)?;
    Ok(Outcome::Ok)
}

fn cmd_scale(a: ScaleArgs) -> Result<Outcome> {
    let out = required(&a.out, "out")?.clone();
    let mb = ManifestBuilder::start("scale", &a, 0)?;
    let mut sweeps = Vec::new();
    let mut inputs = Vec::new();
    for item in &a.sweeps {
        let (label, dir) = item
            .split_once('=')
            .ok_or_else(|| usage(format!("--sweep expects LABEL=DIR, got {item:?}")))?;
        let path = Path::new(dir).join(harness::SWEEP_JSON);
        sweeps.push((label.to_string(), harness::read_sweep(&path).with_context(|| format!("reading {}", path.display()))?));
        inputs.push(path);
    }
    let report = harness::scale_compare(&sweeps)?;
    fs::create_dir_all(&out)?;
    let csv = out.join(harness::SCALE_CSV);
    let mut w = BufWriter::new(File::create(&csv)?);
    harness::write_scale_csv(&mut w, &report)?;
    w.flush()?;
    let gaps = out.join("memorization_gap.json");
    fs::write(&gaps, serde_json::to_string_pretty(&report.gaps)?)?;
    mb.finish(&inputs, &[csv, gaps], &out.join(MANIFEST_FILE))?;
    for g in &report.gaps {
        println!(
            "{}: L={} d_model={} baseline em {:.3} gap {:.3}",
            g.label, g.n_layers, g.d_model, g.baseline_em_rate, g.memorization_gap
        );
    }
    Ok(Outcome::Ok)
}

fn cmd_bounds(a: BoundsArgs) -> Result<Outcome> {
    let out = required(&a.out, "out")?.clone();
    let mb = ManifestBuilder::start("bounds", &a, a.seed)?;
    let dims = TrialDims {
        max_tokens: a.max_n,
        max_dim: a.max_d,
        max_w_norm: a.max_w_norm,
    };
    let activation = match a.activation {
        ActivationArg::Identity => Activation::Identity,
        ActivationArg::Gelu => Activation::Gelu,
    };
    if a.trials == 0 {
        return Err(usage("--trials must be at least 1"));
    }
    let records = bounds::run_trials(a.trials, &dims, activation, a.seed)?;
    let gap = bounds::depth_gap_from(&records, a.seed);
    fs::create_dir_all(&out)?;
    let lines = out.join("bounds.jsonl");
    let mut w = BufWriter::new(File::create(&lines)?);
    bounds::write_json_lines(&mut w, &records)?;
    w.flush()?;
    let gap_path = out.join("depth_gap.json");
    fs::write(&gap_path, serde_json::to_string_pretty(&gap)?)?;
    mb.finish(&[], &[lines, gap_path], &out.join(MANIFEST_FILE))?;

    let count = |f: fn(&bounds::TrialRecord) -> bool| records.iter().filter(|r| !f(r)).count();
    let v1 = count(|r| r.theorem1.holds);
    let v2a = count(|r| r.theorem2.case_replace_at_l.holds);
    let v2b = count(|r| r.theorem2.case_replace_at_l1.holds);
    println!("trials: {}", records.len());
    println!("single-block violations: {v1}");
    println!("two-block violations (replace at L): {v2a}");
    println!("two-block violations (replace at L+1): {v2b}");
    let fmt = |v: Option<f64>| v.map_or_else(|| "n/a".to_string(), |x| format!("{x:.4}"));
    println!(
        "depth gap: median measured ratio {}, median bound ratio {}, degenerate {}",
        fmt(gap.median_measured_ratio),
        fmt(gap.median_rhs_ratio),
        gap.degenerate
    );
    Ok(if v1 + v2a + v2b == 0 { Outcome::Ok } else { Outcome::Violation })
}

fn ids_to_string(ids: &[u32]) -> String {
    ids.iter().map(u32::to_string).collect::<Vec<_>>().join(",")
}

fn cmd_generate(a: GenerateArgs) -> Result<Outcome> {
    let ckpt = required(&a.ckpt, "ckpt")?;
    let prefix = parse_id_list(&a.prefix, "--prefix")?;
    let (cfg, w) = load_checkpoint(ckpt)?;
    let spec = match &a.short_circuit {
        Some(s) => InterventionSpec::new(parse_id_list(s, "--short-circuit")?.into_iter().map(|v| v as usize), cfg.n_layers)?,
        None => InterventionSpec::vanilla(),
    };
    if a.compare && spec.is_vanilla() {
        return Err(usage("--compare needs --short-circuit"));
    }
    let mb = ManifestBuilder::start("generate", &a, a.seed)?;
    let generate = |spec: &InterventionSpec| -> Result<Vec<u32>> {
        if a.n == 0 {
            return Ok(Vec::new());
        }
        if prefix.is_empty() {
            return Err(usage("--prefix must hold at least one token"));
        }
        Ok(match a.temperature {
            Some(t) => sample_generate(&w, &cfg, &prefix, a.n, spec, t, a.seed)?,
            None => greedy_generate(&w, &cfg, &prefix, a.n, spec)?,
        })
    };
    let generated = generate(&spec)?;
    let vanilla = if a.compare { Some(generate(&InterventionSpec::vanilla())?) } else { None };
    match &vanilla {
        Some(v) => {
            println!("vanilla:             {}", ids_to_string(v));
            println!("short-circuit {:<6} {}", spec.to_string() + ":", ids_to_string(&generated));
        }
        None if !generated.is_empty() => println!("{}", ids_to_string(&generated)),
        None => {}
    }
    if let Some(out) = &a.out {
        #[derive(Serialize)]
        struct Generated<'a> {
            prefix: &'a [u32],
            intervention: &'a InterventionSpec,
            generated: &'a [u32],
            vanilla: Option<&'a [u32]>,
        }
        let record = Generated {
            prefix: &prefix,
            intervention: &spec,
            generated: &generated,
            vanilla: vanilla.as_deref(),
        };
        fs::write(out, serde_json::to_string_pretty(&record)?)?;
        mb.finish(&[ckpt.clone()], &[out.clone()], &sibling(out, ".manifest.json"))?;
    }
    Ok(Outcome::Ok)
}
