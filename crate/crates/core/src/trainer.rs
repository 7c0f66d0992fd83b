// SPDX-License-Identifier: MIT OR Apache-2.0

//! Adam training on next-token cross-entropy, plus a finite-difference
//! gradient check.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backprop::{loss_and_grad, loss_only};
use crate::corpus::Corpus;
use crate::error::{AscError, Result};
use crate::model::{InterventionSpec, ModelConfig, TransformerWeights};
use crate::seed::derive_seed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub seq_len: usize,
    pub grad_clip_norm: f64,
    /// Linear warmup length; 0 disables warmup.
    pub warmup_steps: usize,
    /// After warmup the rate decays linearly to `learning_rate * final_lr_ratio`
    /// at the last step; 1 keeps it constant.
    pub final_lr_ratio: f64,
    /// Evaluate canary and held-out loss every this many steps (0 = never).
    pub eval_interval: usize,
    pub rng_seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 3e-4,
            beta1: 0.9,
            beta2: 0.95,
            adam_eps: 1e-8,
            batch_size: 8,
            steps: 1000,
            seq_len: 128,
            grad_clip_norm: 1.0,
            warmup_steps: 0,
            final_lr_ratio: 1.0,
            eval_interval: 100,
            rng_seed: 0,
        }
    }
}

impl TrainConfig {
    /// Learning rate used for the update at `step` (0-based).
    pub fn lr_at(&self, step: usize) -> f64 {
        if step < self.warmup_steps {
            return self.learning_rate * (step + 1) as f64 / self.warmup_steps as f64;
        }
        let span = self.steps.saturating_sub(self.warmup_steps + 1);
        if span == 0 {
            return self.learning_rate;
        }
        let frac = (step - self.warmup_steps) as f64 / span as f64;
        self.learning_rate * (1.0 - (1.0 - self.final_lr_ratio) * frac.min(1.0))
    }

    pub fn validate(&self, cfg: &ModelConfig) -> Result<()> {
        for (name, v) in [
            ("learning_rate", self.learning_rate),
            ("adam_eps", self.adam_eps),
            ("grad_clip_norm", self.grad_clip_norm),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(AscError::config(&[name], format!("{name} must be positive")));
            }
        }
        if !(0.0..=1.0).contains(&self.final_lr_ratio) {
            return Err(AscError::config(&["final_lr_ratio"], "final_lr_ratio must lie in [0, 1]"));
        }
        for (name, v) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(v > 0.0 && v < 1.0) {
                return Err(AscError::config(&[name], format!("{name} must lie in (0, 1)")));
            }
        }
        if self.batch_size == 0 {
            return Err(AscError::config(&["batch_size"], "batch_size must be at least 1"));
        }
        if self.seq_len < 1 || self.seq_len > cfg.max_seq_len {
            return Err(AscError::config(
                &["seq_len", "max_seq_len"],
                format!("seq_len {} must lie in 1..={}", self.seq_len, cfg.max_seq_len),
            ));
        }
        Ok(())
    }
}

/// One row of the loss history.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: usize,
    pub train_loss: f64,
    pub canary_loss: Option<f64>,
    pub heldout_loss: Option<f64>,
}

pub struct TrainOutcome {
    pub weights: TransformerWeights,
    pub history: Vec<LossRecord>,
}

/// Writes the loss history as `step,train_loss,canary_loss,heldout_loss`;
/// steps without an evaluation leave the last two fields empty.
pub fn write_loss_csv<W: Write>(mut out: W, history: &[LossRecord]) -> Result<()> {
    writeln!(out, "step,train_loss,canary_loss,heldout_loss")?;
    let opt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
    for r in history {
        writeln!(
            out,
            "{},{:.6},{},{}",
            r.step,
            r.train_loss,
            opt(r.canary_loss),
            opt(r.heldout_loss)
        )?;
    }
    Ok(())
}

struct Adam {
    m: TransformerWeights,
    v: TransformerWeights,
    t: i32,
}

impl Adam {
    fn new(cfg: &ModelConfig) -> Self {
        Self {
            m: TransformerWeights::zeros(cfg),
            v: TransformerWeights::zeros(cfg),
            t: 0,
        }
    }

    fn update(&mut self, w: &mut TransformerWeights, grad: &TransformerWeights, lr: f64, tcfg: &TrainConfig) {
        self.t += 1;
        let (b1, b2) = (tcfg.beta1, tcfg.beta2);
        let bc1 = 1.0 - b1.powi(self.t);
        let bc2 = 1.0 - b2.powi(self.t);
        let tensors = w.tensors_mut();
        let ms = self.m.tensors_mut();
        let vs = self.v.tensors_mut();
        for (((p, g), m), v) in tensors.into_iter().zip(grad.tensors()).zip(ms).zip(vs) {
            for i in 0..p.len() {
                m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                p[i] -= lr * mhat / (vhat.sqrt() + tcfg.adam_eps);
            }
        }
    }
}

fn zero_grad(grad: &mut TransformerWeights) {
    for t in grad.tensors_mut() {
        t.iter_mut().for_each(|v| *v = 0.0);
    }
}

/// Global L2 norm over every gradient tensor.
fn global_norm(grad: &TransformerWeights) -> f64 {
    grad.tensors()
        .iter()
        .map(|t| t.iter().map(|v| v * v).sum::<f64>())
        .sum::<f64>()
        .sqrt()
}

/// Mean teacher-forced loss over whole canaries (`prefix ‖ suffix`).
fn canary_loss(w: &TransformerWeights, cfg: &ModelConfig, corpus: &Corpus, limit: usize) -> Result<Option<f64>> {
    let seqs: Vec<Vec<u32>> = corpus
        .canaries
        .iter()
        .take(limit)
        .map(|c| c.prefix.iter().chain(&c.suffix).copied().collect())
        .collect();
    if seqs.is_empty() || seqs[0].len() < 2 || seqs[0].len() > cfg.max_seq_len {
        return Ok(None);
    }
    let inputs: Vec<&[u32]> = seqs.iter().map(|s| &s[..s.len() - 1]).collect();
    let targets: Vec<&[u32]> = seqs.iter().map(|s| &s[1..]).collect();
    loss_only(w, cfg, &inputs, &targets, &InterventionSpec::vanilla()).map(Some)
}

fn heldout_loss(w: &TransformerWeights, cfg: &ModelConfig, corpus: &Corpus, seq_len: usize, windows: usize) -> Result<Option<f64>> {
    let stream = &corpus.heldout;
    if stream.len() < seq_len + 1 {
        return Ok(None);
    }
    let n = windows.min((stream.len() - 1) / seq_len).max(1);
    let inputs: Vec<&[u32]> = (0..n).map(|i| &stream[i * seq_len..(i + 1) * seq_len]).collect();
    let targets: Vec<&[u32]> = (0..n).map(|i| &stream[i * seq_len + 1..(i + 1) * seq_len + 1]).collect();
    loss_only(w, cfg, &inputs, &targets, &InterventionSpec::vanilla()).map(Some)
}

/// Trains from the seeded initialization.
pub fn train(cfg: &ModelConfig, tcfg: &TrainConfig, corpus: &Corpus) -> Result<TrainOutcome> {
    train_with_progress(cfg, tcfg, corpus, |_| {})
}

/// Like [`train`], reporting each loss record as it is produced.
pub fn train_with_progress(
    cfg: &ModelConfig,
    tcfg: &TrainConfig,
    corpus: &Corpus,
    mut progress: impl FnMut(&LossRecord),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    tcfg.validate(cfg)?;
    if let Some(&t) = corpus.train.iter().find(|&&t| t as usize >= cfg.vocab_size) {
        return Err(AscError::config(
            &["vocab_size"],
            format!("corpus token {t} exceeds model vocabulary {}", cfg.vocab_size),
        ));
    }
    let mut weights = TransformerWeights::init(cfg, derive_seed(tcfg.rng_seed, "init"))?;
    let mut history = Vec::with_capacity(tcfg.steps);
    if tcfg.steps == 0 {
        return Ok(TrainOutcome { weights, history });
    }
    let window = tcfg.seq_len + 1;
    if corpus.train.len() < window {
        return Err(AscError::Input(format!(
            "training stream of {} tokens is shorter than one window of {window}",
            corpus.train.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(tcfg.rng_seed, "batches"));
    let mut grad = TransformerWeights::zeros(cfg);
    let mut adam = Adam::new(cfg);
    let vanilla = InterventionSpec::vanilla();

    for step in 0..tcfg.steps {
        let offsets: Vec<usize> = (0..tcfg.batch_size)
            .map(|_| rng.gen_range(0..=corpus.train.len() - window))
            .collect();
        let inputs: Vec<&[u32]> = offsets.iter().map(|&o| &corpus.train[o..o + tcfg.seq_len]).collect();
        let targets: Vec<&[u32]> = offsets.iter().map(|&o| &corpus.train[o + 1..o + window]).collect();

        zero_grad(&mut grad);
        let loss = loss_and_grad(&weights, cfg, &inputs, &targets, &vanilla, &mut grad)?;
        if !loss.is_finite() {
            return Err(AscError::Divergence { step, loss });
        }
        let norm = global_norm(&grad);
        if !norm.is_finite() {
            return Err(AscError::Divergence { step, loss: norm });
        }
        if norm > tcfg.grad_clip_norm {
            let s = tcfg.grad_clip_norm / norm;
            for t in grad.tensors_mut() {
                t.iter_mut().for_each(|v| *v *= s);
            }
        }
        adam.update(&mut weights, &grad, tcfg.lr_at(step), tcfg);

        let eval_now = tcfg.eval_interval > 0 && ((step + 1) % tcfg.eval_interval == 0 || step + 1 == tcfg.steps);
        let (canary, heldout) = if eval_now {
            (
                canary_loss(&weights, cfg, corpus, 64)?,
                heldout_loss(&weights, cfg, corpus, tcfg.seq_len, 16)?,
            )
        } else {
            (None, None)
        };
        let record = LossRecord {
            step,
            train_loss: loss,
            canary_loss: canary,
            heldout_loss: heldout,
        };
        progress(&record);
        history.push(record);
    }
    Ok(TrainOutcome { weights, history })
}

// ---------------------------------------------------------------------------
// Gradient check
// ---------------------------------------------------------------------------

/// Central-difference step used by [`grad_check`].
pub const GRAD_CHECK_STEP: f64 = 1e-5;
/// Gradients smaller than this are compared in absolute rather than relative terms.
pub const GRAD_CHECK_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradProbe {
    /// Flat index into the canonical parameter order.
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub probes: Vec<GradProbe>,
    pub max_rel_error: f64,
}

/// `|a - n| / max(|a|, |n|, GRAD_CHECK_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(GRAD_CHECK_FLOOR)
}

pub(crate) fn param_mut(w: &mut TransformerWeights, mut index: usize) -> &mut f64 {
    for t in w.tensors_mut() {
        if index < t.len() {
            return &mut t[index];
        }
        index -= t.len();
    }
    panic!("parameter index out of range");
}

/// A random tiny training problem: weights, one input row and its targets.
pub struct GradProblem {
    pub weights: TransformerWeights,
    pub inputs: Vec<u32>,
    pub targets: Vec<u32>,
}

impl GradProblem {
    pub fn random(cfg: &ModelConfig, seq_len: usize, seed: u64) -> Result<Self> {
        let mut weights = TransformerWeights::init(cfg, derive_seed(seed, "gradcheck-init"))?;
        // Scale up from the training init so every path carries signal without
        // saturating softmax into round-off-sized gradients.
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "gradcheck-perturb"));
        for t in weights.tensors_mut() {
            t.iter_mut().for_each(|v| *v = *v * 5.0 + rng.gen_range(-0.2..0.2));
        }
        let inputs = (0..seq_len).map(|_| rng.gen_range(0..cfg.vocab_size as u32)).collect();
        let targets = (0..seq_len).map(|_| rng.gen_range(0..cfg.vocab_size as u32)).collect();
        Ok(Self { weights, inputs, targets })
    }

    pub fn loss(&self, spec: &InterventionSpec, cfg: &ModelConfig) -> Result<f64> {
        loss_only(&self.weights, cfg, &[&self.inputs], &[&self.targets], spec)
    }

    pub fn analytic_gradient(&self, spec: &InterventionSpec, cfg: &ModelConfig) -> Result<TransformerWeights> {
        let mut grad = TransformerWeights::zeros(cfg);
        loss_and_grad(&self.weights, cfg, &[&self.inputs], &[&self.targets], spec, &mut grad)?;
        Ok(grad)
    }

    /// Central difference of the loss along parameter `index` with step `h`.
    pub fn central_difference(&self, spec: &InterventionSpec, cfg: &ModelConfig, index: usize, h: f64) -> Result<f64> {
        let mut w = self.weights.clone();
        let base = *param_mut(&mut w, index);
        *param_mut(&mut w, index) = base + h;
        let plus = loss_only(&w, cfg, &[&self.inputs], &[&self.targets], spec)?;
        *param_mut(&mut w, index) = base - h;
        let minus = loss_only(&w, cfg, &[&self.inputs], &[&self.targets], spec)?;
        Ok((plus - minus) / (2.0 * h))
    }
}

/// Compares analytic gradients against central differences on `probe_dims`
/// randomly chosen parameters of a random tiny model.
pub fn grad_check(cfg: &ModelConfig, probe_dims: usize, seed: u64) -> Result<GradCheckReport> {
    grad_check_with(cfg, probe_dims, seed, &InterventionSpec::vanilla())
}

pub fn grad_check_with(cfg: &ModelConfig, probe_dims: usize, seed: u64, spec: &InterventionSpec) -> Result<GradCheckReport> {
    cfg.validate()?;
    if cfg.d_model > 8 || cfg.n_layers > 2 || cfg.max_seq_len < 2 {
        return Err(AscError::config(
            &["d_model", "n_layers"],
            "grad_check expects a tiny model (d_model <= 8, n_layers <= 2)",
        ));
    }
    let seq_len = cfg.max_seq_len.min(5);
    let problem = GradProblem::random(cfg, seq_len, seed)?;
    let grad = problem.analytic_gradient(spec, cfg)?;
    let flat: Vec<f64> = grad.tensors().iter().flat_map(|t| t.iter().copied()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "gradcheck-probes"));
    let mut probes = Vec::with_capacity(probe_dims);
    for _ in 0..probe_dims {
        let index = rng.gen_range(0..flat.len());
        let numeric = problem.central_difference(spec, cfg, index, GRAD_CHECK_STEP)?;
        let analytic = flat[index];
        probes.push(GradProbe {
            index,
            analytic,
            numeric,
            rel_error: relative_error(analytic, numeric),
        });
    }
    let max_rel_error = probes.iter().map(|p| p.rel_error).fold(0.0, f64::max);
    Ok(GradCheckReport { probes, max_rel_error })
}
