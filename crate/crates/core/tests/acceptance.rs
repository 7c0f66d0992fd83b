// SPDX-License-Identifier: MIT OR Apache-2.0

//! Acceptance suite. Prints one PASS/FAIL line per criterion, plus one for
//! the smoothed canary-loss invariant of the acceptance run, and exits
//! non-zero if any of them fails. The target is not part of a plain
//! `cargo test`; run it with `cargo test -p asc-core --test acceptance`.
//!
//! Criteria 6 to 9 need the trained acceptance model. It is trained on
//! first use and cached under the cargo target directory, keyed by a
//! digest of its corpus, model and training configuration; delete
//! `target/tmp/acceptance/` to retrain. Pass criterion numbers as
//! arguments to run a subset: `cargo test --test acceptance -- 1 2 3`.

use std::collections::BTreeSet;
use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use asc_core::bounds::{run_trials, theorem1_check, Activation, AttentionMode, Ffn, TheoremBlock, TrialDims, BOUND_SLACK};
use asc_core::checkpoint::{encode_checkpoint, load_checkpoint, save_checkpoint};
use asc_core::corpus::{build_corpus, count_occurrences, BackgroundGenerator, CanaryPreset, Corpus, CorpusSpec};
use asc_core::harness::{
    induction_probes, last_quartile_layers, run_sweep, InductionConfig, SweepData, SweepPlan, SweepResult,
};
use asc_core::metrics::{
    ce_split, completion_entropy, exact_match, heldout_perplexity, token_accuracy, Canary, CanarySet,
};
use asc_core::model::{forward, greedy_generate, InterventionSpec, ModelConfig, TraceLevel, TransformerWeights};
use asc_core::tensor::Matrix;
use asc_core::trainer::{grad_check, grad_check_with, train, train_with_progress, write_loss_csv, LossRecord, TrainConfig};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

const N_TRIALS: usize = 1000;

type BoxResult<T> = Result<T, Box<dyn std::error::Error>>;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Result<Outcome, String> {
    Ok(Outcome { pass, detail })
}

fn main() -> ExitCode {
    let selected: BTreeSet<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let criteria: [(usize, &str, fn(&mut Acceptance) -> Result<Outcome, String>); 10] = [
        (1, "theorem 1, identity activation", criterion_1),
        (2, "theorem 2, stacked pairs", criterion_2),
        (3, "gelu-mode bounds", criterion_3),
        (4, "metric oracles", criterion_4),
        (5, "gradient check", criterion_5),
        (6, "memorization gate", criterion_6),
        (7, "single-layer trend", criterion_7),
        (8, "completion entropy separation", criterion_8),
        (9, "reasoning vs language drop", criterion_9),
        (10, "invariant suite", criterion_10),
    ];
    let mut ctx = Acceptance::default();
    let mut failed = 0;
    for (n, name, check) in criteria {
        if !selected.is_empty() && !selected.contains(&n) {
            continue;
        }
        let t = Instant::now();
        let (tag, detail) = verdict(check(&mut ctx));
        let secs = t.elapsed().as_secs_f64();
        if tag == "FAIL" {
            failed += 1;
        }
        println!("criterion {n:>2} {tag} {name}: {detail} [{secs:.1}s]");
        if n == 6 {
            let (tag, detail) = verdict(canary_loss_trend(&mut ctx));
            if tag == "FAIL" {
                failed += 1;
            }
            println!("invariant    {tag} smoothed canary loss non-increasing: {detail}");
        }
    }
    if failed > 0 {
        println!("{failed} checks failed");
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}

fn verdict(result: Result<Outcome, String>) -> (&'static str, String) {
    match result {
        Ok(o) if o.pass => ("PASS", o.detail),
        Ok(o) => ("FAIL", o.detail),
        Err(e) => ("FAIL", format!("error: {e}")),
    }
}

// ---------------------------------------------------------------------------
// Bound checks
// ---------------------------------------------------------------------------

fn dims() -> TrialDims {
    TrialDims {
        max_tokens: 8,
        max_dim: 16,
        max_w_norm: 3.0,
    }
}

fn criterion_1(_: &mut Acceptance) -> Result<Outcome, String> {
    let t = Instant::now();
    let records = run_trials(N_TRIALS, &dims(), Activation::Identity, 2024).map_err(|e| e.to_string())?;
    let violations = records.iter().filter(|r| !r.theorem1.holds).count();
    let min_slack = records.iter().map(|r| r.theorem1.slack).fold(f64::INFINITY, f64::min);

    // Two orthonormal tokens, α = (1/2, 1/2), W = I: measured and bound are both √2.
    let tight = TheoremBlock::new(
        Ffn::Identity { w: Matrix::identity(2) },
        AttentionMode::from_last_row(&[0.5, 0.5]).map_err(|e| e.to_string())?,
    )
    .map_err(|e| e.to_string())?;
    let x = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).map_err(|e| e.to_string())?;
    let r = theorem1_check(&tight, &x).map_err(|e| e.to_string())?;
    let secs = t.elapsed().as_secs_f64();
    let tight_ok = r.holds && r.slack.abs() <= BOUND_SLACK;
    outcome(
        violations == 0 && tight_ok && secs < 10.0,
        format!(
            "{violations}/{N_TRIALS} violations, min slack {min_slack:.3e}, tight n=2 slack {:.1e}, {secs:.2}s of 10s",
            r.slack
        ),
    )
}

fn criterion_2(_: &mut Acceptance) -> Result<Outcome, String> {
    let t = Instant::now();
    let records = run_trials(N_TRIALS, &dims(), Activation::Identity, 4048).map_err(|e| e.to_string())?;
    let secs = t.elapsed().as_secs_f64();
    let case1 = records.iter().filter(|r| !r.theorem2.case_replace_at_l.holds).count();
    let case2 = records.iter().filter(|r| !r.theorem2.case_replace_at_l1.holds).count();
    outcome(
        case1 == 0 && case2 == 0 && secs < 30.0,
        format!("case 1: {case1}/{N_TRIALS} violations, case 2: {case2}/{N_TRIALS} violations, {secs:.2}s of 30s"),
    )
}

fn criterion_3(_: &mut Acceptance) -> Result<Outcome, String> {
    let records = run_trials(N_TRIALS, &dims(), Activation::Gelu, 7).map_err(|e| e.to_string())?;
    let violations = records.iter().filter(|r| !r.all_hold()).count();
    let nonzero_eps = records.iter().filter(|r| r.theorem1.rhs_terms.eps_diff_norm > 0.0).count();
    outcome(
        violations == 0,
        format!("{violations}/{N_TRIALS} trials with a violated bound; ε term non-zero in {nonzero_eps}"),
    )
}

// ---------------------------------------------------------------------------
// Metric oracles and gradient check
// ---------------------------------------------------------------------------

fn tiny_cfg(vocab: usize) -> ModelConfig {
    ModelConfig {
        n_layers: 2,
        n_heads: 2,
        d_model: 8,
        d_ff: 16,
        vocab_size: vocab,
        max_seq_len: 16,
        layer_norm_eps: 1e-5,
    }
}

/// Emits `logits` at every position: the final layer norm has zero gain,
/// its bias is the first basis vector, and unembedding row 0 is `logits`.
fn constant_logit_model(cfg: &ModelConfig, logits: &[f64]) -> TransformerWeights {
    let mut w = TransformerWeights::init(cfg, 1).expect("valid config");
    w.final_ln_gain = vec![0.0; cfg.d_model];
    w.final_ln_bias = vec![0.0; cfg.d_model];
    w.final_ln_bias[0] = 1.0;
    let mut u = Matrix::zeros(cfg.d_model, cfg.vocab_size);
    u.row_mut(0).copy_from_slice(logits);
    w.unembedding = u;
    w
}

fn naive_entropy(w: &TransformerWeights, cfg: &ModelConfig, c: &Canary, spec: &InterventionSpec) -> f64 {
    let full = c.full();
    let mut total = 0.0;
    for i in c.prefix.len()..full.len() {
        let trace = forward(w, cfg, &full[..i], spec, TraceLevel::LogitsOnly).unwrap();
        let logits = trace.logits.row(i - 1);
        let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = logits.iter().map(|v| (v - m).exp()).sum();
        total -= logits
            .iter()
            .map(|v| (v - m).exp() / z)
            .filter(|&p| p > 0.0)
            .map(|p| p * p.ln())
            .sum::<f64>();
    }
    total
}

fn criterion_4(_: &mut Acceptance) -> Result<Outcome, String> {
    let e = |e: asc_core::AscError| e.to_string();
    let vanilla = InterventionSpec::vanilla();
    let mut failures = Vec::new();

    let cfg = tiny_cfg(10);
    let mut peaked = vec![0.0; 10];
    peaked[7] = 5.0;
    let seven = constant_logit_model(&cfg, &peaked);
    let hit = Canary::new(vec![1, 2, 3], vec![7; 4]);
    let miss = Canary::new(vec![1, 2, 3], vec![7, 7, 2, 7]);
    let hand = [
        ("EM all-7 suffix", exact_match(&seven, &cfg, &hit, &vanilla).map_err(e)? as f64, 1.0),
        ("EM one non-7", exact_match(&seven, &cfg, &miss, &vanilla).map_err(e)? as f64, 0.0),
        ("TA all-7 suffix", token_accuracy(&seven, &cfg, &hit, &vanilla).map_err(e)?, 1.0),
        ("TA one non-7", token_accuracy(&seven, &cfg, &miss, &vanilla).map_err(e)?, 0.75),
    ];
    for (name, got, want) in hand {
        if got != want {
            failures.push(format!("{name}: {got} != {want}"));
        }
    }

    let cfg4 = tiny_cfg(4);
    let c = Canary::new(vec![0, 1], vec![2, 3]);
    let uniform = constant_logit_model(&cfg4, &[0.0; 4]);
    let ce = completion_entropy(&uniform, &cfg4, &c, &vanilla).map_err(e)?;
    if (ce - 2.0 * 4f64.ln()).abs() > 1e-12 {
        failures.push(format!("uniform CE {ce} != 2 ln 4"));
    }
    let saturated = constant_logit_model(&cfg4, &[1e4, -1e4, -1e4, -1e4]);
    let ce = completion_entropy(&saturated, &cfg4, &c, &vanilla).map_err(e)?;
    if ce.abs() > 1e-12 {
        failures.push(format!("saturated CE {ce} != 0"));
    }

    // Naive entropy oracle on a random model with sharp logits.
    let cfg12 = tiny_cfg(12);
    let mut w = TransformerWeights::init(&cfg12, 4).map_err(e)?;
    for t in w.tensors_mut() {
        t.iter_mut().for_each(|v| *v *= 30.0);
    }
    let mut worst: f64 = 0.0;
    for i in 0..20u32 {
        let c = Canary::new((0..5).map(|j| (i * 7 + j * 5) % 12).collect(), (0..4).map(|j| (i * 3 + j * 11) % 12).collect());
        for spec in [vanilla.clone(), InterventionSpec::new([1], 2).map_err(e)?] {
            let ce = completion_entropy(&w, &cfg12, &c, &spec).map_err(e)?;
            worst = worst.max((ce - naive_entropy(&w, &cfg12, &c, &spec)).abs());
        }
    }
    if worst >= 1e-9 {
        failures.push(format!("CE vs naive oracle differs by {worst:.2e}"));
    }

    let cfg9 = tiny_cfg(9);
    let uniform9 = constant_logit_model(&cfg9, &[0.0; 9]);
    let stream: Vec<u32> = (0..100).map(|i| (i * 7 % 9) as u32).collect();
    let ppl = heldout_perplexity(&uniform9, &cfg9, &stream, &vanilla, 8, 3).map_err(e)?;
    let ppl_rel = (ppl - 9.0).abs() / 9.0;
    if ppl_rel > 1e-6 {
        failures.push(format!("uniform perplexity {ppl} != 9"));
    }

    let detail = if failures.is_empty() {
        format!("hand EM/TA/CE exact, naive CE max diff {worst:.1e}, uniform ppl rel err {ppl_rel:.1e}")
    } else {
        failures.join("; ")
    };
    outcome(failures.is_empty(), detail)
}

fn criterion_5(_: &mut Acceptance) -> Result<Outcome, String> {
    let cfg = ModelConfig {
        max_seq_len: 5,
        vocab_size: 13,
        ..tiny_cfg(13)
    };
    let vanilla = grad_check(&cfg, 100, 1).map_err(|e| e.to_string())?;
    let sc = InterventionSpec::new([0], 2).map_err(|e| e.to_string())?;
    let short_circuit = grad_check_with(&cfg, 100, 2, &sc).map_err(|e| e.to_string())?;
    let worst = vanilla.max_rel_error.max(short_circuit.max_rel_error);
    outcome(
        worst < 1e-4,
        format!(
            "max relative error {:.2e} (vanilla), {:.2e} (layer 0 short-circuited) over 100 probes each",
            vanilla.max_rel_error, short_circuit.max_rel_error
        ),
    )
}

// ---------------------------------------------------------------------------
// Acceptance model
// ---------------------------------------------------------------------------

#[derive(Serialize)]
struct Recipe {
    corpus: CorpusSpec,
    model: ModelConfig,
    train: TrainConfig,
}

fn recipe() -> Recipe {
    Recipe {
        corpus: CorpusSpec::from_preset(CanaryPreset::PythiaStyle, 512, 64, 200, 1),
        model: ModelConfig {
            n_layers: 8,
            n_heads: 4,
            d_model: 128,
            d_ff: 512,
            vocab_size: 512,
            max_seq_len: 128,
            layer_norm_eps: 1e-5,
        },
        train: TrainConfig {
            learning_rate: 1e-3,
            warmup_steps: 100,
            steps: 6000,
            batch_size: 8,
            seq_len: 128,
            final_lr_ratio: 0.1,
            eval_interval: 25,
            rng_seed: 1,
            ..TrainConfig::default()
        },
    }
}

#[derive(Serialize, Deserialize)]
struct TrainStats {
    train_seconds: f64,
}

struct Trained {
    recipe: Recipe,
    corpus: Corpus,
    weights: TransformerWeights,
    history: Vec<LossRecord>,
    train_seconds: f64,
    sweep: SweepResult,
    sweep_seconds: f64,
}

#[derive(Default)]
struct Acceptance {
    trained: Option<Result<Trained, String>>,
}

impl Acceptance {
    fn trained(&mut self) -> Result<&Trained, String> {
        self.trained.get_or_insert_with(|| load_or_train().map_err(|e| format!("acceptance model: {e}"))).as_ref().map_err(Clone::clone)
    }
}

fn read_history(path: &PathBuf) -> BoxResult<Vec<LossRecord>> {
    let text = fs::read_to_string(path)?;
    let field = |s: &str| -> BoxResult<Option<f64>> { Ok(if s.is_empty() { None } else { Some(s.parse()?) }) };
    let mut out = Vec::new();
    for line in text.lines().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 4 {
            return Err(format!("bad loss row {line:?}").into());
        }
        out.push(LossRecord {
            step: f[0].parse()?,
            train_loss: f[1].parse()?,
            canary_loss: field(f[2])?,
            heldout_loss: field(f[3])?,
        });
    }
    Ok(out)
}

fn load_or_train() -> BoxResult<Trained> {
    let recipe = recipe();
    let key = hex_digest(serde_json::to_string(&recipe)?.as_bytes());
    let dir = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("acceptance");
    fs::create_dir_all(&dir)?;
    let ckpt = dir.join(format!("{}.ckpt", &key[..16]));
    let loss = dir.join(format!("{}.loss.csv", &key[..16]));
    let stats = dir.join(format!("{}.stats.json", &key[..16]));

    let t = Instant::now();
    let corpus = build_corpus(&recipe.corpus)?;
    eprintln!("acceptance corpus: {} tokens in {:.1}s", corpus.train.len(), t.elapsed().as_secs_f64());

    if !(ckpt.exists() && loss.exists() && stats.exists()) {
        eprintln!("training acceptance model ({} steps), cache {}", recipe.train.steps, ckpt.display());
        let t = Instant::now();
        let out = train_with_progress(&recipe.model, &recipe.train, &corpus, |r| {
            if r.step % 250 == 0 {
                eprintln!("  step {:>5} train loss {:.4} [{:.0}s]", r.step, r.train_loss, t.elapsed().as_secs_f64());
            }
        })?;
        let train_seconds = t.elapsed().as_secs_f64();
        let mut csv = Vec::new();
        write_loss_csv(&mut csv, &out.history)?;
        fs::write(&loss, csv)?;
        fs::write(&stats, serde_json::to_string(&TrainStats { train_seconds })?)?;
        save_checkpoint(&ckpt, &recipe.model, &out.weights)?;
    }
    // Evaluate exactly what a checkpoint user would see.
    let (cfg, weights) = load_checkpoint(&ckpt)?;
    if cfg != recipe.model {
        return Err("cached checkpoint has a different model config".into());
    }
    let history = read_history(&loss)?;
    let TrainStats { train_seconds } = serde_json::from_str(&fs::read_to_string(&stats)?)?;

    let t = Instant::now();
    let data = SweepData::from_corpus(cfg.clone(), weights.clone(), &corpus)?;
    let sweep = run_sweep(&SweepPlan::default_for(cfg.n_layers)?, &data)?;
    let sweep_seconds = t.elapsed().as_secs_f64();
    Ok(Trained {
        recipe,
        corpus,
        weights,
        history,
        train_seconds,
        sweep,
        sweep_seconds,
    })
}

fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.4}")).unwrap_or_else(|| "n/a".into())
}

// ---------------------------------------------------------------------------
// Trained-model criteria
// ---------------------------------------------------------------------------

fn criterion_6(ctx: &mut Acceptance) -> Result<Outcome, String> {
    let t = ctx.trained()?;
    let base = t.sweep.baseline();
    let em = base.em_rate.ok_or("baseline has no em_rate")?;
    let control_em = base.control_em_rate.ok_or("baseline has no control em_rate")?;
    let planted_controls = t
        .corpus
        .controls
        .iter()
        .filter(|c| count_occurrences(&t.corpus.train, &c.full()) > 0)
        .count();

    let pass = em >= 0.90 && control_em == 0.0 && planted_controls == 0 && t.train_seconds < 7200.0;
    outcome(
        pass,
        format!(
            "vanilla em_rate {em:.4} (>= 0.90), control em_rate {control_em:.4} (= 0), \
             {planted_controls} controls found in corpus, {} steps trained in {:.0}s of 7200s",
            t.recipe.train.steps,
            t.train_seconds
        ),
    )
}

/// Trainer invariant: canary loss smoothed over 100-step windows never rises.
fn canary_loss_trend(ctx: &mut Acceptance) -> Result<Outcome, String> {
    let t = ctx.trained()?;
    let mut windows: Vec<(usize, f64, usize)> = Vec::new();
    for r in &t.history {
        if let Some(c) = r.canary_loss {
            match windows.last_mut() {
                Some((w, sum, n)) if *w == r.step / 100 => {
                    *sum += c;
                    *n += 1;
                }
                _ => windows.push((r.step / 100, c, 1)),
            }
        }
    }
    let smoothed: Vec<f64> = windows.iter().map(|&(_, sum, n)| sum / n as f64).collect();
    if smoothed.len() < 2 {
        return Err("fewer than two 100-step windows with a canary evaluation".into());
    }
    let rises: Vec<String> = smoothed
        .windows(2)
        .zip(&windows[1..])
        .filter(|(p, _)| p[1] > p[0])
        .map(|(p, w)| format!("{}: {:.4}->{:.4}", w.0 * 100, p[0], p[1]))
        .collect();
    outcome(
        rises.is_empty(),
        format!(
            "{} windows, {:.4} -> {:.4}, {} rises{}",
            smoothed.len(),
            smoothed[0],
            smoothed[smoothed.len() - 1],
            rises.len(),
            if rises.is_empty() { String::new() } else { format!(" [{}]", rises.join(", ")) }
        ),
    )
}

fn criterion_7(ctx: &mut Acceptance) -> Result<Outcome, String> {
    let t = ctx.trained()?;
    let n_layers = t.recipe.model.n_layers;
    let base = t.sweep.baseline();
    let base_ppl = base.heldout_ppl.ok_or("baseline has no perplexity")?;
    let last = last_quartile_layers(n_layers);
    let mut qualifying = Vec::new();
    let mut last_ppl = Vec::new();
    for &l in &last {
        let row = t.sweep.single_layer(l).ok_or(format!("layer {l} not swept"))?;
        let ppl = row.heldout_ppl.ok_or("missing perplexity")?;
        let drop = row.rel_drop_em.unwrap_or(0.0);
        if drop >= 0.5 && ppl <= 1.10 * base_ppl {
            qualifying.push(l);
        }
        last_ppl.push((l, drop, ppl));
    }
    let layer0 = t.sweep.single_layer(0).ok_or("layer 0 not swept")?.heldout_ppl.ok_or("missing perplexity")?;
    let worst_last = last_ppl.iter().map(|&(_, _, p)| p).fold(f64::NEG_INFINITY, f64::max);
    let a = !qualifying.is_empty();
    let b = layer0 > worst_last;
    let per_layer: Vec<String> = last_ppl
        .iter()
        .map(|(l, d, p)| format!("L{l} em drop {d:.3} ppl {:+.2}%", 100.0 * (p / base_ppl - 1.0)))
        .collect();
    outcome(
        a && b,
        format!(
            "(a) {}: qualifying last-quartile layers {qualifying:?} [{}]; (b) {}: layer 0 ppl {:+.2}% vs worst last-quartile {:+.2}%",
            if a { "ok" } else { "no" },
            per_layer.join(", "),
            if b { "ok" } else { "no" },
            100.0 * (layer0 / base_ppl - 1.0),
            100.0 * (worst_last / base_ppl - 1.0)
        ),
    )
}

fn criterion_8(ctx: &mut Acceptance) -> Result<Outcome, String> {
    let t = ctx.trained()?;
    let base = t.sweep.baseline();
    let ce = |set| -> Vec<f64> {
        base.per_canary
            .iter()
            .filter(|p| p.set == set)
            .map(|p| p.scores.completion_entropy)
            .collect()
    };
    let split = ce_split(&ce(CanarySet::Memorized), &ce(CanarySet::Nonmemorized)).map_err(|e| e.to_string())?;
    let sep = split.separation();
    outcome(
        split.memorized.mean < split.nonmemorized.mean && sep >= 2.0,
        format!(
            "mean CE memorized {:.4}, controls {:.4}, pooled std {:.4}, separation {sep:.2} std (>= 2)",
            split.memorized.mean, split.nonmemorized.mean, split.pooled_stddev
        ),
    )
}

fn criterion_9(ctx: &mut Acceptance) -> Result<Outcome, String> {
    let t = ctx.trained()?;
    let chance = 1.0 / t.recipe.model.vocab_size as f64;
    let base_acc = t.sweep.baseline().induction_accuracy;
    // A drop measured against a chance-level baseline says nothing, so the
    // vanilla model must also clear the induction gate.
    let learned = base_acc.is_some_and(|a| a > 10.0 * chance);
    let gate = format!(
        "vanilla induction accuracy {} (> 10x chance = {:.4}: {learned})",
        fmt_opt(base_acc),
        10.0 * chance
    );
    let last = last_quartile_layers(t.recipe.model.n_layers);
    let (mut reasoning, mut language) = (Vec::new(), Vec::new());
    for &l in &last {
        let row = t.sweep.single_layer(l).ok_or(format!("layer {l} not swept"))?;
        match (row.rel_drop_reasoning, row.rel_drop_language) {
            (Some(r), Some(g)) => {
                reasoning.push(r);
                language.push(g);
            }
            _ => return outcome(false, format!("relative drops undefined at layer {l}; {gate}")),
        }
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let (r, g) = (mean(&reasoning), mean(&language));
    outcome(r < g && learned, format!("mean last-quartile drop: reasoning {r:.4} vs language {g:.4}; {gate}"))
}

// ---------------------------------------------------------------------------
// Invariants
// ---------------------------------------------------------------------------

fn small_cfg() -> ModelConfig {
    ModelConfig {
        n_layers: 4,
        n_heads: 2,
        d_model: 16,
        d_ff: 32,
        vocab_size: 32,
        max_seq_len: 24,
        layer_norm_eps: 1e-5,
    }
}

/// A random model with weights scaled up so attention is far from uniform.
fn sharp_model(cfg: &ModelConfig, seed: u64) -> TransformerWeights {
    let mut w = TransformerWeights::init(cfg, seed).expect("valid config");
    for t in w.tensors_mut() {
        t.iter_mut().for_each(|v| *v *= 10.0);
    }
    w
}

fn all_specs(n_layers: usize) -> Vec<InterventionSpec> {
    (0..1usize << n_layers)
        .map(|mask| InterventionSpec::new((0..n_layers).filter(|l| mask >> l & 1 == 1), n_layers).unwrap())
        .collect()
}

fn single_token_noop(cfg: &ModelConfig, w: &TransformerWeights) -> Result<(), String> {
    let vanilla = InterventionSpec::vanilla();
    for tok in 0..cfg.vocab_size as u32 {
        let base = forward(w, cfg, &[tok], &vanilla, TraceLevel::LastToken).map_err(|e| e.to_string())?;
        for spec in all_specs(cfg.n_layers) {
            let sc = forward(w, cfg, &[tok], &spec, TraceLevel::LastToken).map_err(|e| e.to_string())?;
            if sc.logits != base.logits || sc.last_token != base.last_token {
                return Err(format!("token {tok}, intervention {spec}: outputs differ"));
            }
        }
    }
    Ok(())
}

fn locality(cfg: &ModelConfig, w: &TransformerWeights, tokens: &[u32]) -> Result<(), String> {
    let base = forward(w, cfg, tokens, &InterventionSpec::vanilla(), TraceLevel::Full).map_err(|e| e.to_string())?;
    let base_blocks = base.full.as_ref().unwrap();
    for l in 0..cfg.n_layers {
        let spec = InterventionSpec::new([l], cfg.n_layers).unwrap();
        let sc = forward(w, cfg, tokens, &spec, TraceLevel::Full).map_err(|e| e.to_string())?;
        let blocks = sc.full.as_ref().unwrap();
        for (k, (b, s)) in base_blocks.iter().zip(blocks).enumerate() {
            if k < l && (b.post_attn != s.post_attn || b.post_ffn != s.post_ffn || b.attention != s.attention) {
                return Err(format!("short-circuiting layer {l} changed block {k}"));
            }
            // Position 0 only ever attends to itself.
            if b.post_ffn.row(0) != s.post_ffn.row(0) {
                return Err(format!("short-circuiting layer {l} changed position 0 at block {k}"));
            }
        }
        if base_blocks[l].post_attn == blocks[l].post_attn {
            return Err(format!("short-circuiting layer {l} had no effect on that layer"));
        }
    }
    Ok(())
}

fn attention_rows(cfg: &ModelConfig, w: &TransformerWeights, tokens: &[u32]) -> Result<f64, String> {
    let mut worst: f64 = 0.0;
    for spec in all_specs(cfg.n_layers) {
        let trace = forward(w, cfg, tokens, &spec, TraceLevel::Full).map_err(|e| e.to_string())?;
        for (l, block) in trace.full.unwrap().iter().enumerate() {
            for a in &block.attention {
                for i in 0..a.rows() {
                    let row = a.row(i);
                    if row.iter().any(|&p| p < 0.0) || row[i + 1..].iter().any(|&p| p != 0.0) {
                        return Err(format!("layer {l} row {i} is negative or not causal"));
                    }
                    if spec.contains(l) && (row[i] != 1.0 || row.iter().sum::<f64>() != 1.0) {
                        return Err(format!("short-circuited layer {l} row {i} is not the identity"));
                    }
                    worst = worst.max((row.iter().sum::<f64>() - 1.0).abs());
                }
            }
        }
    }
    if worst > 1e-12 {
        return Err(format!("attention row sum off by {worst:.2e}"));
    }
    Ok(worst)
}

fn em_implies_ta(sweep: &SweepResult) -> Result<usize, String> {
    let mut checked = 0;
    for row in &sweep.rows {
        let mem: Vec<_> = row.per_canary.iter().filter(|p| p.set == CanarySet::Memorized).collect();
        for p in &row.per_canary {
            if p.scores.em == 1 && p.scores.token_accuracy != 1.0 {
                return Err(format!("{}: canary {} has EM without full TA", row.intervention, p.index));
            }
            checked += 1;
        }
        let rate = mem.iter().map(|p| p.scores.em as f64).sum::<f64>() / mem.len() as f64;
        if row.em_rate != Some(rate) {
            return Err(format!("{}: em_rate is not the mean of EM flags", row.intervention));
        }
    }
    Ok(checked)
}

/// A small corpus and trainer run whose checkpoint bytes are hashed.
fn determinism(cfg: &ModelConfig) -> Result<String, String> {
    let e = |e: asc_core::AscError| e.to_string();
    let spec = CorpusSpec {
        background: BackgroundGenerator::MarkovChain { order: 2, seed: 3 },
        vocab_size: cfg.vocab_size,
        background_tokens: 4000,
        heldout_tokens: 500,
        n_canaries: 4,
        canary_prefix_len: 6,
        canary_suffix_len: 6,
        canary_repetitions: 5,
        n_controls: 4,
        repeat_rate: 0.01,
        seed: 3,
    };
    let tcfg = TrainConfig {
        steps: 15,
        batch_size: 4,
        seq_len: 16,
        eval_interval: 5,
        rng_seed: 11,
        ..TrainConfig::default()
    };
    let hash = |seed: u64| -> Result<String, String> {
        let corpus = build_corpus(&spec).map_err(e)?;
        let out = train(cfg, &TrainConfig { rng_seed: seed, ..tcfg.clone() }, &corpus).map_err(e)?;
        Ok(hex_digest(&encode_checkpoint(cfg, &out.weights).map_err(e)?))
    };
    let (a, b, other) = (hash(11)?, hash(11)?, hash(12)?);
    if a != b {
        return Err(format!("same seed, different checkpoints: {a} vs {b}"));
    }
    if a == other {
        return Err("different seeds gave the same checkpoint".into());
    }

    // Sweep rows: repeated and permuted plans give identical rows.
    let corpus = build_corpus(&spec).map_err(e)?;
    let w = TransformerWeights::init(cfg, 5).map_err(e)?;
    let data = SweepData::from_corpus(cfg.clone(), w, &corpus).map_err(e)?;
    let mut plan = SweepPlan::default_for(cfg.n_layers).map_err(e)?;
    plan.perplexity.window = 16;
    plan.perplexity.stride = 16;
    plan.induction = InductionConfig {
        n_probes: 32,
        body_len: 12,
        key_len: 2,
    };
    let first = run_sweep(&plan, &data).map_err(e)?;
    let again = run_sweep(&plan, &data).map_err(e)?;
    if serde_json::to_vec(&first.rows).unwrap() != serde_json::to_vec(&again.rows).unwrap() {
        return Err("repeated sweep rows differ".into());
    }
    let mut reversed = plan.clone();
    let tail: Vec<_> = reversed.interventions.drain(1..).rev().collect();
    reversed.interventions.extend(tail);
    let rev = run_sweep(&reversed, &data).map_err(e)?;
    for row in &rev.rows {
        let orig = first.rows.iter().find(|r| r.intervention == row.intervention).unwrap();
        if serde_json::to_vec(orig).unwrap() != serde_json::to_vec(row).unwrap() {
            return Err(format!("{} differs when the plan is permuted", row.intervention));
        }
    }
    Ok(a)
}

fn criterion_10(ctx: &mut Acceptance) -> Result<Outcome, String> {
    let t0 = Instant::now();
    let cfg = small_cfg();
    let tokens: Vec<u32> = (0..cfg.max_seq_len as u32).map(|i| (i * 13 + 5) % cfg.vocab_size as u32).collect();
    let mut checks = Vec::new();
    let mut failures = Vec::new();
    for seed in 0..3 {
        let w = sharp_model(&cfg, seed);
        if let Err(msg) = single_token_noop(&cfg, &w) {
            failures.push(format!("single-token no-op: {msg}"));
        }
        if let Err(msg) = locality(&cfg, &w, &tokens) {
            failures.push(format!("locality: {msg}"));
        }
        if let Err(msg) = attention_rows(&cfg, &w, &tokens) {
            failures.push(format!("attention rows: {msg}"));
        }
    }
    checks.push("single-token no-op, locality and attention rows on 3 models x 16 interventions".to_string());

    // Greedy continuations agree with repeated full forward passes.
    let w = sharp_model(&cfg, 9);
    let spec = InterventionSpec::new([1, 2], cfg.n_layers).unwrap();
    let gen = greedy_generate(&w, &cfg, &tokens[..6], 10, &spec).map_err(|e| e.to_string())?;
    let mut seq = tokens[..6].to_vec();
    for _ in 0..10 {
        let tr = forward(&w, &cfg, &seq, &spec, TraceLevel::LogitsOnly).map_err(|e| e.to_string())?;
        seq.push(asc_core::model::argmax(tr.logits.row(seq.len() - 1)) as u32);
    }
    if gen != seq[6..] {
        failures.push("cached greedy decoding disagrees with full forward passes".into());
    }

    match determinism(&cfg) {
        Ok(hash) => checks.push(format!("checkpoint hash {}.., sweeps repeat and permute identically", &hash[..12])),
        Err(msg) => failures.push(format!("determinism: {msg}")),
    }
    let local_secs = t0.elapsed().as_secs_f64();

    let trained = ctx.trained()?;
    match em_implies_ta(&trained.sweep) {
        Ok(n) => checks.push(format!("EM => TA over {n} scored canaries")),
        Err(msg) => failures.push(format!("EM => TA: {msg}")),
    }
    let probes = induction_probes(trained.recipe.model.vocab_size, &trained.sweep.plan.induction, trained.sweep.plan.seed)
        .map_err(|e| e.to_string())?;
    let leaked = probes.iter().filter(|p| count_occurrences(&trained.corpus.train, &p.tokens) > 0).count();
    if leaked > 0 {
        failures.push(format!("{leaked} induction probes occur in the training corpus"));
    } else {
        checks.push(format!("0/{} induction probes in the training corpus", probes.len()));
    }
    if trained.weights.validate(&trained.recipe.model).is_err() {
        failures.push("acceptance weights fail validation".into());
    }
    if local_secs >= 300.0 {
        failures.push(format!("suite took {local_secs:.0}s of 300s"));
    }
    let pass = failures.is_empty();
    let detail = if pass {
        format!(
            "{}; {local_secs:.1}s of 300s (acceptance sweep {:.0}s reused)",
            checks.join("; "),
            trained.sweep_seconds
        )
    } else {
        failures.join("; ")
    };
    outcome(pass, detail)
}
