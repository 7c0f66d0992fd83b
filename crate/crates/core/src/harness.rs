// SPDX-License-Identifier: MIT OR Apache-2.0

//! Intervention sweeps and the tables built from them.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::load_checkpoint;
use crate::corpus::Corpus;
use crate::error::{AscError, Result};
use crate::metrics::{evaluate_canaries, heldout_perplexity, Canary, CanaryScores, CanarySet, PerCanary, PerplexityWindow};
use crate::model::{argmax, forward_batch, InterventionSpec, ModelConfig, Retain, TransformerWeights};
use crate::seed::derive_seed;

/// Quartile of layer `i` in an `n_layers`-deep model: `⌊4i/L⌋`.
pub fn quartile_of(layer: usize, n_layers: usize) -> usize {
    4 * layer / n_layers
}

/// Layers in quartile `q`; empty when `L < 4` leaves the quartile unused.
pub fn quartile_layers(q: usize, n_layers: usize) -> Vec<usize> {
    (0..n_layers).filter(|&i| quartile_of(i, n_layers) == q).collect()
}

pub fn last_quartile_layers(n_layers: usize) -> Vec<usize> {
    quartile_layers(3, n_layers)
}

/// `layer / L`.
pub fn normalized_depth(layer: usize, n_layers: usize) -> f64 {
    layer as f64 / n_layers as f64
}

// ---------------------------------------------------------------------------
// Induction probes
// ---------------------------------------------------------------------------

/// In-context copy probes: `body_len` distinct random tokens followed by a
/// repeat of `key_len` consecutive body tokens; the answer is the body token
/// that followed them.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct InductionConfig {
    pub n_probes: usize,
    pub body_len: usize,
    pub key_len: usize,
}

impl Default for InductionConfig {
    fn default() -> Self {
        Self {
            n_probes: 256,
            body_len: 48,
            key_len: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InductionProbe {
    pub tokens: Vec<u32>,
    pub answer: u32,
}

pub fn induction_probes(vocab_size: usize, ic: &InductionConfig, seed: u64) -> Result<Vec<InductionProbe>> {
    if ic.n_probes == 0 {
        return Err(AscError::Input("induction evaluation needs at least one probe".into()));
    }
    if ic.key_len == 0 || ic.body_len <= ic.key_len || ic.body_len > vocab_size {
        return Err(AscError::Input(format!(
            "induction probe needs key_len >= 1 and key_len < body_len <= vocab_size, got {ic:?}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "induction-probes"));
    let vocab: Vec<u32> = (0..vocab_size as u32).collect();
    Ok((0..ic.n_probes)
        .map(|_| {
            let body: Vec<u32> = vocab.choose_multiple(&mut rng, ic.body_len).copied().collect();
            let j = rng.gen_range(0..ic.body_len - ic.key_len);
            let mut tokens = body.clone();
            tokens.extend_from_slice(&body[j..j + ic.key_len]);
            InductionProbe {
                tokens,
                answer: body[j + ic.key_len],
            }
        })
        .collect())
}

/// Fraction of probes whose greedy next token is the answer.
pub fn induction_task_eval(
    w: &TransformerWeights,
    cfg: &ModelConfig,
    spec: &InterventionSpec,
    ic: &InductionConfig,
    seed: u64,
) -> Result<f64> {
    let probes = induction_probes(cfg.vocab_size, ic, seed)?;
    let len = probes[0].tokens.len();
    if len > cfg.max_seq_len {
        return Err(AscError::Input(format!(
            "induction probe of {len} tokens exceeds max_seq_len {}",
            cfg.max_seq_len
        )));
    }
    let mut hits = 0usize;
    for chunk in probes.chunks(64) {
        let seqs: Vec<&[u32]> = chunk.iter().map(|p| p.tokens.as_slice()).collect();
        let fwd = forward_batch(w, cfg, &seqs, spec, Retain::default())?;
        for (b, p) in chunk.iter().enumerate() {
            if argmax(fwd.logits.row(b * len + len - 1)) as u32 == p.answer {
                hits += 1;
            }
        }
    }
    Ok(hits as f64 / probes.len() as f64)
}

// ---------------------------------------------------------------------------
// Sweeps
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Tasks {
    pub memorization: bool,
    pub heldout_ppl: bool,
    pub induction: bool,
}

impl Default for Tasks {
    fn default() -> Self {
        Self {
            memorization: true,
            heldout_ppl: true,
            induction: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPlan {
    /// Evaluated in this order; the vanilla baseline is always first.
    pub interventions: Vec<InterventionSpec>,
    pub tasks: Tasks,
    pub perplexity: PerplexityWindow,
    pub induction: InductionConfig,
    pub seed: u64,
}

impl SweepPlan {
    pub fn new(interventions: Vec<InterventionSpec>) -> Self {
        let mut all = vec![InterventionSpec::vanilla()];
        all.extend(interventions.into_iter().filter(|s| !s.is_vanilla()));
        Self {
            interventions: all,
            tasks: Tasks::default(),
            perplexity: PerplexityWindow { window: 128, stride: 64 },
            induction: InductionConfig::default(),
            seed: 0,
        }
    }

    /// Baseline plus each single layer.
    pub fn per_layer(n_layers: usize) -> Result<Self> {
        let specs = (0..n_layers).map(|i| InterventionSpec::new([i], n_layers)).collect::<Result<_>>()?;
        Ok(Self::new(specs))
    }

    /// Baseline plus each non-empty quartile group.
    pub fn quartile(n_layers: usize) -> Result<Self> {
        let specs = (0..4)
            .map(|q| quartile_layers(q, n_layers))
            .filter(|g| !g.is_empty())
            .map(|g| InterventionSpec::new(g, n_layers))
            .collect::<Result<_>>()?;
        Ok(Self::new(specs))
    }

    /// Baseline, each single layer, then the quartile groups.
    pub fn default_for(n_layers: usize) -> Result<Self> {
        let mut plan = Self::per_layer(n_layers)?;
        plan.interventions.extend(Self::quartile(n_layers)?.interventions.into_iter().skip(1));
        Ok(plan)
    }

    pub fn validate(&self, cfg: &ModelConfig) -> Result<()> {
        if self.interventions.is_empty() {
            return Err(AscError::Plan("sweep plan has no interventions".into()));
        }
        if !self.interventions[0].is_vanilla() {
            return Err(AscError::Plan("sweep plan must start with the vanilla baseline".into()));
        }
        for s in &self.interventions {
            s.check(cfg.n_layers)?;
        }
        Ok(())
    }
}

/// Everything a sweep reads; shared immutably across evaluations.
#[derive(Debug, Clone)]
pub struct SweepData {
    pub cfg: ModelConfig,
    pub weights: TransformerWeights,
    pub memorized: Vec<Canary>,
    pub controls: Vec<Canary>,
    pub heldout: Vec<u32>,
}

impl SweepData {
    pub fn load(checkpoint: &Path, corpus_dir: &Path) -> Result<Self> {
        let (cfg, weights) = load_checkpoint(checkpoint)?;
        let corpus = Corpus::load(corpus_dir)?;
        Self::from_corpus(cfg, weights, &corpus)
    }

    pub fn from_corpus(cfg: ModelConfig, weights: TransformerWeights, corpus: &Corpus) -> Result<Self> {
        if corpus.spec.vocab_size != cfg.vocab_size {
            return Err(AscError::Input(format!(
                "corpus vocabulary {} does not match model vocabulary {}",
                corpus.spec.vocab_size, cfg.vocab_size
            )));
        }
        Ok(Self {
            cfg,
            weights,
            memorized: corpus.canaries.clone(),
            controls: corpus.controls.clone(),
            heldout: corpus.heldout.clone(),
        })
    }
}

/// A relative drop; `None` when the baseline is zero or the task was not run.
pub type Drop = Option<f64>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub intervention: InterventionSpec,
    pub em_rate: Option<f64>,
    pub mean_ta: Option<f64>,
    pub mean_ce_memorized: Option<f64>,
    pub mean_ce_nonmemorized: Option<f64>,
    pub control_em_rate: Option<f64>,
    pub heldout_ppl: Option<f64>,
    pub induction_accuracy: Option<f64>,
    /// Relative decrease of exact-match rate.
    pub rel_drop_em: Drop,
    /// Relative decrease of induction accuracy.
    pub rel_drop_reasoning: Drop,
    /// Relative decrease of `1 / heldout_ppl`.
    pub rel_drop_language: Drop,
    /// Any performance metric better than the baseline's.
    pub exceeds_baseline: bool,
    pub per_canary: Vec<PerCanary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub config: ModelConfig,
    pub plan: SweepPlan,
    /// In plan order; row 0 is the baseline.
    pub rows: Vec<SweepRow>,
}

impl SweepResult {
    pub fn baseline(&self) -> &SweepRow {
        &self.rows[0]
    }

    /// Row of the single-layer intervention on `layer`, if swept.
    pub fn single_layer(&self, layer: usize) -> Option<&SweepRow> {
        self.rows.iter().find(|r| r.intervention.layers() == [layer])
    }
}

fn mean(xs: &[f64]) -> Option<f64> {
    (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64)
}

/// `(base − x) / base`, undefined for a zero baseline.
pub fn relative_drop(base: f64, x: f64) -> Drop {
    (base != 0.0 && base.is_finite()).then(|| (base - x) / base)
}

fn evaluate_row(data: &SweepData, plan: &SweepPlan, spec: &InterventionSpec) -> Result<SweepRow> {
    let (w, cfg) = (&data.weights, &data.cfg);
    let mut row = SweepRow {
        intervention: spec.clone(),
        em_rate: None,
        mean_ta: None,
        mean_ce_memorized: None,
        mean_ce_nonmemorized: None,
        control_em_rate: None,
        heldout_ppl: None,
        induction_accuracy: None,
        rel_drop_em: None,
        rel_drop_reasoning: None,
        rel_drop_language: None,
        exceeds_baseline: false,
        per_canary: Vec::new(),
    };
    if plan.tasks.memorization {
        let mem = evaluate_canaries(w, cfg, &data.memorized, spec)?;
        let non = evaluate_canaries(w, cfg, &data.controls, spec)?;
        let col = |s: &[CanaryScores], f: fn(&CanaryScores) -> f64| -> Vec<f64> { s.iter().map(f).collect() };
        row.em_rate = mean(&col(&mem, |s| s.em as f64));
        row.mean_ta = mean(&col(&mem, |s| s.token_accuracy));
        row.mean_ce_memorized = mean(&col(&mem, |s| s.completion_entropy));
        row.mean_ce_nonmemorized = mean(&col(&non, |s| s.completion_entropy));
        row.control_em_rate = mean(&col(&non, |s| s.em as f64));
        let tag = |set, scores: Vec<CanaryScores>| {
            scores
                .into_iter()
                .enumerate()
                .map(move |(index, scores)| PerCanary { set, index, scores })
        };
        row.per_canary = tag(CanarySet::Memorized, mem).chain(tag(CanarySet::Nonmemorized, non)).collect();
    }
    if plan.tasks.heldout_ppl {
        row.heldout_ppl = Some(heldout_perplexity(
            w,
            cfg,
            &data.heldout,
            spec,
            plan.perplexity.window,
            plan.perplexity.stride,
        )?);
    }
    if plan.tasks.induction {
        row.induction_accuracy = Some(induction_task_eval(w, cfg, spec, &plan.induction, plan.seed)?);
    }
    Ok(row)
}

fn fill_drops(rows: &mut [SweepRow]) {
    let base = rows[0].clone();
    for row in rows.iter_mut() {
        row.rel_drop_em = base.em_rate.zip(row.em_rate).and_then(|(b, x)| relative_drop(b, x));
        row.rel_drop_reasoning = base
            .induction_accuracy
            .zip(row.induction_accuracy)
            .and_then(|(b, x)| relative_drop(b, x));
        row.rel_drop_language = base
            .heldout_ppl
            .zip(row.heldout_ppl)
            .and_then(|(b, x)| relative_drop(1.0 / b, 1.0 / x));
        let better = |b: Option<f64>, x: Option<f64>| b.zip(x).is_some_and(|(b, x)| x > b);
        row.exceeds_baseline = better(base.induction_accuracy, row.induction_accuracy)
            || better(base.heldout_ppl.map(|p| -p), row.heldout_ppl.map(|p| -p));
    }
}

/// Evaluates every intervention of `plan` against the shared weights.
pub fn run_sweep(plan: &SweepPlan, data: &SweepData) -> Result<SweepResult> {
    plan.validate(&data.cfg)?;
    let mut rows = plan
        .interventions
        .par_iter()
        .map(|spec| evaluate_row(data, plan, spec))
        .collect::<Result<Vec<_>>>()?;
    fill_drops(&mut rows);
    Ok(SweepResult {
        config: data.cfg.clone(),
        plan: plan.clone(),
        rows,
    })
}

// ---------------------------------------------------------------------------
// Emission
// ---------------------------------------------------------------------------

pub const SWEEP_JSON: &str = "sweep.json";
pub const SWEEP_CSV: &str = "sweep.csv";
pub const SCALE_CSV: &str = "scale_compare.csv";
/// Written in place of a value that is undefined.
pub const UNDEFINED: &str = "undefined";

fn cell(v: Option<f64>) -> String {
    v.map_or_else(|| UNDEFINED.to_string(), |x| format!("{x:.6}"))
}

/// One row per intervention.
pub fn write_sweep_csv<W: Write>(mut out: W, result: &SweepResult) -> Result<()> {
    writeln!(
        out,
        "intervention,em_rate,mean_ta,mean_ce_mem,mean_ce_nonmem,heldout_ppl,induction_acc,rel_drop_reasoning,rel_drop_language,exceeds_baseline"
    )?;
    for r in &result.rows {
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{}",
            r.intervention,
            cell(r.em_rate),
            cell(r.mean_ta),
            cell(r.mean_ce_memorized),
            cell(r.mean_ce_nonmemorized),
            cell(r.heldout_ppl),
            cell(r.induction_accuracy),
            cell(r.rel_drop_reasoning),
            cell(r.rel_drop_language),
            r.exceeds_baseline
        )?;
    }
    Ok(())
}

/// Relative decrease of the reasoning and language proxies per intervention.
pub fn write_relative_drop_csv<W: Write>(mut out: W, result: &SweepResult) -> Result<()> {
    writeln!(out, "intervention,rel_drop_reasoning,rel_drop_language")?;
    for r in &result.rows {
        writeln!(out, "{},{},{}", r.intervention, cell(r.rel_drop_reasoning), cell(r.rel_drop_language))?;
    }
    Ok(())
}

/// Writes `sweep.json` and `sweep.csv` into `dir`.
pub fn write_sweep(dir: &Path, result: &SweepResult) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut json = BufWriter::new(File::create(dir.join(SWEEP_JSON))?);
    serde_json::to_writer_pretty(&mut json, result)?;
    json.flush()?;
    let mut csv = BufWriter::new(File::create(dir.join(SWEEP_CSV))?);
    write_sweep_csv(&mut csv, result)?;
    csv.flush()?;
    Ok(())
}

pub fn read_sweep(path: &Path) -> Result<SweepResult> {
    Ok(serde_json::from_reader(std::io::BufReader::new(File::open(path)?))?)
}

// ---------------------------------------------------------------------------
// Scale comparison
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScaleRow {
    pub label: String,
    pub n_layers: usize,
    pub d_model: usize,
    pub layer: usize,
    pub normalized_depth: f64,
    pub em_rate: Option<f64>,
    pub heldout_ppl: Option<f64>,
    pub induction_accuracy: Option<f64>,
    pub rel_drop_em: Drop,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScaleGap {
    pub label: String,
    pub n_layers: usize,
    pub d_model: usize,
    pub baseline_em_rate: f64,
    /// Baseline em rate minus the lowest em rate over last-quartile
    /// single-layer interventions.
    pub memorization_gap: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScaleReport {
    pub rows: Vec<ScaleRow>,
    pub gaps: Vec<ScaleGap>,
}

/// Aligns per-layer results of several sweeps on normalized depth.
pub fn scale_compare(sweeps: &[(String, SweepResult)]) -> Result<ScaleReport> {
    if sweeps.len() < 2 {
        return Err(AscError::Input("scale comparison needs at least two sweeps".into()));
    }
    let mut rows = Vec::new();
    let mut gaps = Vec::new();
    for (label, s) in sweeps {
        let l = s.config.n_layers;
        let base_em = s.baseline().em_rate.ok_or_else(|| {
            AscError::Input(format!("sweep '{label}' has no memorization results"))
        })?;
        let mut last_q = Vec::new();
        for layer in 0..l {
            let r = s
                .single_layer(layer)
                .ok_or_else(|| AscError::Input(format!("sweep '{label}' lacks the single-layer row for layer {layer}")))?;
            let em = r.em_rate.ok_or_else(|| AscError::Input(format!("sweep '{label}' has no memorization results")))?;
            if quartile_of(layer, l) == 3 {
                last_q.push(em);
            }
            rows.push(ScaleRow {
                label: label.clone(),
                n_layers: l,
                d_model: s.config.d_model,
                layer,
                normalized_depth: normalized_depth(layer, l),
                em_rate: r.em_rate,
                heldout_ppl: r.heldout_ppl,
                induction_accuracy: r.induction_accuracy,
                rel_drop_em: r.rel_drop_em,
            });
        }
        let min_last = last_q.iter().copied().fold(f64::INFINITY, f64::min);
        gaps.push(ScaleGap {
            label: label.clone(),
            n_layers: l,
            d_model: s.config.d_model,
            baseline_em_rate: base_em,
            memorization_gap: if min_last.is_finite() { base_em - min_last } else { 0.0 },
        });
    }
    Ok(ScaleReport { rows, gaps })
}

pub fn write_scale_csv<W: Write>(mut out: W, report: &ScaleReport) -> Result<()> {
    writeln!(out, "label,n_layers,d_model,layer,normalized_depth,em_rate,heldout_ppl,induction_acc,rel_drop_em")?;
    for r in &report.rows {
        writeln!(
            out,
            "{},{},{},{},{:.6},{},{},{},{}",
            r.label,
            r.n_layers,
            r.d_model,
            r.layer,
            r.normalized_depth,
            cell(r.em_rate),
            cell(r.heldout_ppl),
            cell(r.induction_accuracy),
            cell(r.rel_drop_em)
        )?;
    }
    Ok(())
}
