// SPDX-License-Identifier: MIT OR Apache-2.0

//! Memorization metrics over canary sets, plus held-out perplexity.
//!
//! - Exact match: greedy continuation of the prefix equals the suffix.
//! - Token accuracy: fraction of positions where the greedy continuation,
//!   cut at `l_s` tokens, agrees with the suffix.
//! - Completion entropy: teacher-forced sum over suffix positions of the
//!   Shannon entropy (nats) of the predictive distribution.

use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{AscError, Result};
use crate::model::{forward_batch, greedy_generate, greedy_generate_batch, InterventionSpec, ModelConfig, Retain, TransformerWeights};
use crate::tensor::{log_sum_exp, softmax_entropy};

/// Canaries are scored in batches of at most this many sequences.
const EVAL_BATCH: usize = 64;

/// A `(prefix, suffix)` pair probed for extractable memorization.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Canary {
    pub prefix: Vec<u32>,
    pub suffix: Vec<u32>,
}

impl Canary {
    pub fn new(prefix: Vec<u32>, suffix: Vec<u32>) -> Self {
        Self { prefix, suffix }
    }

    pub fn validate(&self, cfg: &ModelConfig) -> Result<()> {
        if self.prefix.is_empty() || self.suffix.is_empty() {
            return Err(AscError::Input("canary prefix and suffix must be non-empty".into()));
        }
        if self.prefix.len() + self.suffix.len() > cfg.max_seq_len {
            return Err(AscError::Input(format!(
                "canary of length {} exceeds max_seq_len {}",
                self.prefix.len() + self.suffix.len(),
                cfg.max_seq_len
            )));
        }
        Ok(())
    }

    /// Prefix followed by suffix.
    pub fn full(&self) -> Vec<u32> {
        self.prefix.iter().chain(&self.suffix).copied().collect()
    }
}

/// Scores of one canary under one intervention.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CanaryScores {
    pub em: u8,
    pub token_accuracy: f64,
    /// Nats.
    pub completion_entropy: f64,
}

fn token_accuracy_of(generated: &[u32], suffix: &[u32]) -> f64 {
    let hits = generated.iter().zip(suffix).filter(|(a, b)| a == b).count();
    hits as f64 / suffix.len() as f64
}

/// 1 iff greedy decoding of the prefix reproduces the suffix exactly.
pub fn exact_match(w: &TransformerWeights, cfg: &ModelConfig, c: &Canary, spec: &InterventionSpec) -> Result<u8> {
    c.validate(cfg)?;
    let generated = greedy_generate(w, cfg, &c.prefix, c.suffix.len(), spec)?;
    Ok(u8::from(generated == c.suffix))
}

/// Fraction of suffix positions reproduced by greedy decoding.
pub fn token_accuracy(w: &TransformerWeights, cfg: &ModelConfig, c: &Canary, spec: &InterventionSpec) -> Result<f64> {
    c.validate(cfg)?;
    let generated = greedy_generate(w, cfg, &c.prefix, c.suffix.len(), spec)?;
    Ok(token_accuracy_of(&generated, &c.suffix))
}

/// Teacher-forced completion entropy of the suffix, in nats.
pub fn completion_entropy(w: &TransformerWeights, cfg: &ModelConfig, c: &Canary, spec: &InterventionSpec) -> Result<f64> {
    c.validate(cfg)?;
    Ok(completion_entropies(w, cfg, std::slice::from_ref(c), spec)?[0])
}

/// Completion entropies of canaries sharing one `(l_p, l_s)`.
fn completion_entropies(w: &TransformerWeights, cfg: &ModelConfig, canaries: &[Canary], spec: &InterventionSpec) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(canaries.len());
    for chunk in canaries.chunks(EVAL_BATCH) {
        let l_p = chunk[0].prefix.len();
        let l_s = chunk[0].suffix.len();
        // Logits at positions l_p-1 .. l_p+l_s-2 predict the suffix tokens;
        // the final suffix token is never an input.
        let seqs: Vec<Vec<u32>> = chunk
            .iter()
            .map(|c| {
                let mut f = c.full();
                f.pop();
                f
            })
            .collect();
        let refs: Vec<&[u32]> = seqs.iter().map(Vec::as_slice).collect();
        let fwd = forward_batch(w, cfg, &refs, spec, Retain::default())?;
        let len = l_p + l_s - 1;
        for b in 0..chunk.len() {
            let ce: f64 = (l_p - 1..len).map(|t| softmax_entropy(fwd.logits.row(b * len + t))).sum();
            out.push(ce);
        }
    }
    Ok(out)
}

/// Scores every canary. Canaries may have mixed lengths; each length group
/// is evaluated in lock-step batches.
pub fn evaluate_canaries(
    w: &TransformerWeights,
    cfg: &ModelConfig,
    canaries: &[Canary],
    spec: &InterventionSpec,
) -> Result<Vec<CanaryScores>> {
    for c in canaries {
        c.validate(cfg)?;
    }
    let mut groups: BTreeMap<(usize, usize), Vec<usize>> = BTreeMap::new();
    for (i, c) in canaries.iter().enumerate() {
        groups.entry((c.prefix.len(), c.suffix.len())).or_default().push(i);
    }
    let mut out: Vec<Option<CanaryScores>> = vec![None; canaries.len()];
    for ((_, l_s), idxs) in groups {
        for chunk in idxs.chunks(EVAL_BATCH) {
            let members: Vec<Canary> = chunk.iter().map(|&i| canaries[i].clone()).collect();
            let prefixes: Vec<&[u32]> = members.iter().map(|c| c.prefix.as_slice()).collect();
            let generated = greedy_generate_batch(w, cfg, &prefixes, l_s, spec)?;
            let entropies = completion_entropies(w, cfg, &members, spec)?;
            for (k, &i) in chunk.iter().enumerate() {
                let c = &members[k];
                out[i] = Some(CanaryScores {
                    em: u8::from(generated[k] == c.suffix),
                    token_accuracy: token_accuracy_of(&generated[k], &c.suffix),
                    completion_entropy: entropies[k],
                });
            }
        }
    }
    Ok(out.into_iter().map(|s| s.expect("every canary scored")).collect())
}

/// `exp` of the mean next-token cross-entropy over windows of `window`
/// tokens starting every `stride` tokens. The first token of each window is
/// context only.
pub fn heldout_perplexity(
    w: &TransformerWeights,
    cfg: &ModelConfig,
    stream: &[u32],
    spec: &InterventionSpec,
    window: usize,
    stride: usize,
) -> Result<f64> {
    if window < 2 || window > cfg.max_seq_len + 1 {
        return Err(AscError::Input(format!(
            "perplexity window {window} must lie in 2..={}",
            cfg.max_seq_len + 1
        )));
    }
    if stride == 0 {
        return Err(AscError::Input("perplexity stride must be positive".into()));
    }
    if stream.len() < window {
        return Err(AscError::Input(format!(
            "held-out stream of {} tokens is shorter than the window {window}",
            stream.len()
        )));
    }
    let starts: Vec<usize> = (0..=stream.len() - window).step_by(stride).collect();
    let mut total = 0.0;
    let mut count = 0usize;
    for chunk in starts.chunks(16) {
        let inputs: Vec<&[u32]> = chunk.iter().map(|&s| &stream[s..s + window - 1]).collect();
        let fwd = forward_batch(w, cfg, &inputs, spec, Retain::default())?;
        for (b, &s) in chunk.iter().enumerate() {
            for t in 0..window - 1 {
                let row = fwd.logits.row(b * (window - 1) + t);
                let target = stream[s + t + 1] as usize;
                total += log_sum_exp(row) - row[target];
                count += 1;
            }
        }
    }
    Ok((total / count as f64).exp())
}

// ---------------------------------------------------------------------------
// Reports
// ---------------------------------------------------------------------------

/// Which canary set a row belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CanarySet {
    /// Planted in the training corpus.
    Memorized,
    /// Negative control, never planted.
    Nonmemorized,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerCanary {
    pub set: CanarySet,
    pub index: usize,
    #[serde(flatten)]
    pub scores: CanaryScores,
}

/// All metrics for one intervention.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub intervention: InterventionSpec,
    /// Exact-match rate over the memorized set.
    pub em_rate: f64,
    /// Mean token accuracy over the memorized set.
    pub mean_ta: f64,
    pub mean_ce_memorized: f64,
    pub mean_ce_nonmemorized: f64,
    /// Exact-match rate over the negative controls.
    pub control_em_rate: f64,
    pub heldout_ppl: f64,
    pub per_canary: Vec<PerCanary>,
}

/// Perplexity settings for [`evaluate`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PerplexityWindow {
    pub window: usize,
    pub stride: usize,
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        f64::NAN
    } else {
        s / n as f64
    }
}

/// Scores both canary sets and the held-out stream under `spec`.
pub fn evaluate(
    w: &TransformerWeights,
    cfg: &ModelConfig,
    spec: &InterventionSpec,
    memorized: &[Canary],
    nonmemorized: &[Canary],
    heldout: &[u32],
    ppl: PerplexityWindow,
) -> Result<MetricsReport> {
    let mem = evaluate_canaries(w, cfg, memorized, spec)?;
    let non = evaluate_canaries(w, cfg, nonmemorized, spec)?;
    let heldout_ppl = heldout_perplexity(w, cfg, heldout, spec, ppl.window, ppl.stride)?;
    let per_canary = mem
        .iter()
        .enumerate()
        .map(|(index, s)| PerCanary {
            set: CanarySet::Memorized,
            index,
            scores: s.clone(),
        })
        .chain(non.iter().enumerate().map(|(index, s)| PerCanary {
            set: CanarySet::Nonmemorized,
            index,
            scores: s.clone(),
        }))
        .collect();
    Ok(MetricsReport {
        intervention: spec.clone(),
        em_rate: mean(mem.iter().map(|s| s.em as f64)),
        mean_ta: mean(mem.iter().map(|s| s.token_accuracy)),
        mean_ce_memorized: mean(mem.iter().map(|s| s.completion_entropy)),
        mean_ce_nonmemorized: mean(non.iter().map(|s| s.completion_entropy)),
        control_em_rate: mean(non.iter().map(|s| s.em as f64)),
        heldout_ppl,
        per_canary,
    })
}

/// Flat CSV: one row per canary.
pub fn write_report_csv<W: Write>(mut out: W, report: &MetricsReport) -> Result<()> {
    writeln!(out, "intervention,set,index,em,token_accuracy,completion_entropy")?;
    let label = report.intervention.to_string();
    for row in &report.per_canary {
        let set = match row.set {
            CanarySet::Memorized => "memorized",
            CanarySet::Nonmemorized => "nonmemorized",
        };
        writeln!(
            out,
            "{label},{set},{},{},{:.6},{:.6}",
            row.index, row.scores.em, row.scores.token_accuracy, row.scores.completion_entropy
        )?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Completion-entropy split
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub n: usize,
    pub mean: f64,
    /// Population standard deviation.
    pub stddev: f64,
}

impl Summary {
    pub fn of(values: &[f64]) -> Result<Self> {
        if values.is_empty() {
            return Err(AscError::Input("cannot summarize an empty set".into()));
        }
        let n = values.len();
        let mean = values.iter().sum::<f64>() / n as f64;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
        Ok(Self {
            n,
            mean,
            stddev: var.sqrt(),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CeSplit {
    pub memorized: Summary,
    pub nonmemorized: Summary,
    /// `sqrt((n1·s1² + n2·s2²) / (n1 + n2))` over the population variances.
    pub pooled_stddev: f64,
    /// `mean(nonmemorized) - mean(memorized)`.
    pub gap: f64,
}

impl CeSplit {
    /// Gap measured in pooled standard deviations; infinite when both sets
    /// are constant and the gap is positive.
    pub fn separation(&self) -> f64 {
        if self.pooled_stddev > 0.0 {
            self.gap / self.pooled_stddev
        } else if self.gap > 0.0 {
            f64::INFINITY
        } else {
            0.0
        }
    }
}

/// Summary statistics of completion entropy for the two canary sets.
pub fn ce_split(memorized: &[f64], nonmemorized: &[f64]) -> Result<CeSplit> {
    let m = Summary::of(memorized)?;
    let n = Summary::of(nonmemorized)?;
    let pooled = ((m.n as f64 * m.stddev * m.stddev + n.n as f64 * n.stddev * n.stddev) / (m.n + n.n) as f64).sqrt();
    Ok(CeSplit {
        memorized: m,
        nonmemorized: n,
        pooled_stddev: pooled,
        gap: n.mean - m.mean,
    })
}
