// SPDX-License-Identifier: MIT OR Apache-2.0

//! Decoder-only transformer with per-block attention short-circuiting.
//!
//! Blocks are pre-LN:
//!
//! ```text
//! X'  = X  + MHA(LN1(X))
//! X'' = X' + FFN(LN2(X'))
//! ```
//!
//! Short-circuiting a block replaces every head's attention-weight matrix
//! with the identity, so each position's head output is its own value
//! vector. The value and output projections and the residual path are kept;
//! the query/key projections become dead computation and are skipped.

use std::collections::BTreeSet;
use std::fmt;

use rand::distributions::{Distribution, WeightedIndex};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{AscError, Result};
use crate::tensor::{gelu_scalar, gemm, layer_norm_into, matmul, softmax_in_place, Matrix, View, ViewMut};

// ---------------------------------------------------------------------------
// Configuration and weights
// ---------------------------------------------------------------------------

/// Architecture hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub layer_norm_eps: f64,
}

impl ModelConfig {
    pub fn d_head(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Checks every invariant, naming the offending fields on failure.
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("d_model", self.d_model),
            ("d_ff", self.d_ff),
            ("vocab_size", self.vocab_size),
        ] {
            if v == 0 {
                return Err(AscError::config(&[name], format!("{name} must be at least 1")));
            }
        }
        if self.max_seq_len < 2 {
            return Err(AscError::config(&["max_seq_len"], "max_seq_len must be at least 2"));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(AscError::config(
                &["n_heads", "d_model"],
                format!(
                    "d_model ({}) is not divisible by n_heads ({})",
                    self.d_model, self.n_heads
                ),
            ));
        }
        if !(self.layer_norm_eps > 0.0 && self.layer_norm_eps.is_finite()) {
            return Err(AscError::config(&["layer_norm_eps"], "layer_norm_eps must be positive"));
        }
        if self.vocab_size > u32::MAX as usize {
            return Err(AscError::config(&["vocab_size"], "vocab_size must fit in u32"));
        }
        Ok(())
    }

    pub fn n_params(&self) -> usize {
        let d = self.d_model;
        let per_block = 4 * d + 4 * d * d + 2 * d * self.d_ff + self.d_ff + d;
        self.vocab_size * d * 2 + self.max_seq_len * d + self.n_layers * per_block + 2 * d
    }
}

/// Learned tensors of one transformer block. Projections act on row vectors
/// (`y = x · W`); head `i` owns the contiguous column group
/// `i*d_head..(i+1)*d_head` of `w_q`, `w_k` and `w_v`.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockWeights {
    pub ln1_gain: Vec<f64>,
    pub ln1_bias: Vec<f64>,
    pub w_q: Matrix,
    pub w_k: Matrix,
    pub w_v: Matrix,
    pub w_o: Matrix,
    pub ln2_gain: Vec<f64>,
    pub ln2_bias: Vec<f64>,
    pub ffn_w1: Matrix,
    pub ffn_b1: Vec<f64>,
    pub ffn_w2: Matrix,
    pub ffn_b2: Vec<f64>,
}

/// All parameters of the model.
#[derive(Debug, Clone, PartialEq)]
pub struct TransformerWeights {
    pub token_embedding: Matrix,
    pub positional_embedding: Matrix,
    pub blocks: Vec<BlockWeights>,
    pub final_ln_gain: Vec<f64>,
    pub final_ln_bias: Vec<f64>,
    pub unembedding: Matrix,
}

impl BlockWeights {
    fn zeros(cfg: &ModelConfig) -> Self {
        let d = cfg.d_model;
        Self {
            ln1_gain: vec![0.0; d],
            ln1_bias: vec![0.0; d],
            w_q: Matrix::zeros(d, d),
            w_k: Matrix::zeros(d, d),
            w_v: Matrix::zeros(d, d),
            w_o: Matrix::zeros(d, d),
            ln2_gain: vec![0.0; d],
            ln2_bias: vec![0.0; d],
            ffn_w1: Matrix::zeros(d, cfg.d_ff),
            ffn_b1: vec![0.0; cfg.d_ff],
            ffn_w2: Matrix::zeros(cfg.d_ff, d),
            ffn_b2: vec![0.0; d],
        }
    }
}

impl TransformerWeights {
    /// Every tensor zero-filled, shaped for `cfg`. Used for gradients and
    /// optimizer moments.
    pub fn zeros(cfg: &ModelConfig) -> Self {
        let d = cfg.d_model;
        Self {
            token_embedding: Matrix::zeros(cfg.vocab_size, d),
            positional_embedding: Matrix::zeros(cfg.max_seq_len, d),
            blocks: (0..cfg.n_layers).map(|_| BlockWeights::zeros(cfg)).collect(),
            final_ln_gain: vec![0.0; d],
            final_ln_bias: vec![0.0; d],
            unembedding: Matrix::zeros(d, cfg.vocab_size),
        }
    }

    /// GPT-2 style initialization: N(0, 0.02²) weights, residual output
    /// projections shrunk by `1/sqrt(2L)`, unit layer-norm gains.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = cfg.d_model;
        let std = 0.02;
        let resid_std = std / (2.0 * cfg.n_layers as f64).sqrt();
        let token_embedding = Matrix::random_normal(cfg.vocab_size, d, std, &mut rng);
        let positional_embedding = Matrix::random_normal(cfg.max_seq_len, d, std, &mut rng);
        let blocks = (0..cfg.n_layers)
            .map(|_| BlockWeights {
                ln1_gain: vec![1.0; d],
                ln1_bias: vec![0.0; d],
                w_q: Matrix::random_normal(d, d, std, &mut rng),
                w_k: Matrix::random_normal(d, d, std, &mut rng),
                w_v: Matrix::random_normal(d, d, std, &mut rng),
                w_o: Matrix::random_normal(d, d, resid_std, &mut rng),
                ln2_gain: vec![1.0; d],
                ln2_bias: vec![0.0; d],
                ffn_w1: Matrix::random_normal(d, cfg.d_ff, std, &mut rng),
                ffn_b1: vec![0.0; cfg.d_ff],
                ffn_w2: Matrix::random_normal(cfg.d_ff, d, resid_std, &mut rng),
                ffn_b2: vec![0.0; d],
            })
            .collect();
        let unembedding = Matrix::random_normal(d, cfg.vocab_size, std, &mut rng);
        Ok(Self {
            token_embedding,
            positional_embedding,
            blocks,
            final_ln_gain: vec![1.0; d],
            final_ln_bias: vec![0.0; d],
            unembedding,
        })
    }

    /// Tensors in canonical (checkpoint) order.
    pub fn tensors(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = vec![self.token_embedding.data(), self.positional_embedding.data()];
        for b in &self.blocks {
            out.extend_from_slice(&[
                &b.ln1_gain[..],
                &b.ln1_bias[..],
                b.w_q.data(),
                b.w_k.data(),
                b.w_v.data(),
                b.w_o.data(),
                &b.ln2_gain[..],
                &b.ln2_bias[..],
                b.ffn_w1.data(),
                &b.ffn_b1[..],
                b.ffn_w2.data(),
                &b.ffn_b2[..],
            ]);
        }
        out.push(&self.final_ln_gain);
        out.push(&self.final_ln_bias);
        out.push(self.unembedding.data());
        out
    }

    /// Mutable tensors in canonical (checkpoint) order.
    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = vec![
            self.token_embedding.data_mut(),
            self.positional_embedding.data_mut(),
        ];
        for b in &mut self.blocks {
            out.push(&mut b.ln1_gain);
            out.push(&mut b.ln1_bias);
            out.push(b.w_q.data_mut());
            out.push(b.w_k.data_mut());
            out.push(b.w_v.data_mut());
            out.push(b.w_o.data_mut());
            out.push(&mut b.ln2_gain);
            out.push(&mut b.ln2_bias);
            out.push(b.ffn_w1.data_mut());
            out.push(&mut b.ffn_b1);
            out.push(b.ffn_w2.data_mut());
            out.push(&mut b.ffn_b2);
        }
        out.push(&mut self.final_ln_gain);
        out.push(&mut self.final_ln_bias);
        out.push(self.unembedding.data_mut());
        out
    }

    pub fn n_params(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    /// Checks every tensor against the shapes implied by `cfg`.
    pub fn validate(&self, cfg: &ModelConfig) -> Result<()> {
        cfg.validate()?;
        if self.blocks.len() != cfg.n_layers {
            return Err(AscError::Shape(format!(
                "{} blocks for n_layers = {}",
                self.blocks.len(),
                cfg.n_layers
            )));
        }
        let expected = TransformerWeights::zeros(cfg);
        let shape_ok = self.token_embedding.shape() == expected.token_embedding.shape()
            && self.positional_embedding.shape() == expected.positional_embedding.shape()
            && self.unembedding.shape() == expected.unembedding.shape()
            && self.blocks.iter().all(|b| {
                let e = &expected.blocks[0];
                b.w_q.shape() == e.w_q.shape()
                    && b.w_k.shape() == e.w_k.shape()
                    && b.w_v.shape() == e.w_v.shape()
                    && b.w_o.shape() == e.w_o.shape()
                    && b.ffn_w1.shape() == e.ffn_w1.shape()
                    && b.ffn_w2.shape() == e.ffn_w2.shape()
            });
        let lens_ok = self
            .tensors()
            .iter()
            .zip(expected.tensors())
            .all(|(a, b)| a.len() == b.len());
        if !(shape_ok && lens_ok) {
            return Err(AscError::Shape("weights do not match the model config".into()));
        }
        if !self.tensors().iter().all(|t| t.iter().all(|v| v.is_finite())) {
            return Err(AscError::Input("weights contain non-finite entries".into()));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Interventions and traces
// ---------------------------------------------------------------------------

/// Set of block indices whose attention is short-circuited. Empty = vanilla.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct InterventionSpec {
    short_circuited_layers: BTreeSet<usize>,
}

impl InterventionSpec {
    pub fn vanilla() -> Self {
        Self::default()
    }

    /// Builds a spec, rejecting indices `>= n_layers`.
    pub fn new(layers: impl IntoIterator<Item = usize>, n_layers: usize) -> Result<Self> {
        let spec = Self {
            short_circuited_layers: layers.into_iter().collect(),
        };
        spec.check(n_layers)?;
        Ok(spec)
    }

    pub fn check(&self, n_layers: usize) -> Result<()> {
        if let Some(&bad) = self.short_circuited_layers.iter().find(|&&l| l >= n_layers) {
            return Err(AscError::Plan(format!(
                "intervention layer {bad} out of range for a {n_layers}-layer model"
            )));
        }
        Ok(())
    }

    #[inline]
    pub fn contains(&self, layer: usize) -> bool {
        self.short_circuited_layers.contains(&layer)
    }

    pub fn is_vanilla(&self) -> bool {
        self.short_circuited_layers.is_empty()
    }

    pub fn layers(&self) -> Vec<usize> {
        self.short_circuited_layers.iter().copied().collect()
    }
}

impl fmt::Display for InterventionSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_vanilla() {
            return f.write_str("none");
        }
        let parts: Vec<String> = self.short_circuited_layers.iter().map(|l| l.to_string()).collect();
        f.write_str(&parts.join("+"))
    }
}

/// How much of the forward pass to keep.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TraceLevel {
    LogitsOnly,
    /// Last-token rows of every block's residual outputs.
    LastToken,
    /// Full residual matrices and per-head attention weights.
    Full,
}

/// Last-token residual rows of one block.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockLastToken {
    /// `X'` row: after attention and its residual.
    pub post_attn: Vec<f64>,
    /// `X''` row: after the FFN and its residual.
    pub post_ffn: Vec<f64>,
}

/// Full record of one block.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockFull {
    pub post_attn: Matrix,
    pub post_ffn: Matrix,
    /// One `seq_len x seq_len` matrix per head. Identity for short-circuited blocks.
    pub attention: Vec<Matrix>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace {
    /// `seq_len x vocab_size`.
    pub logits: Matrix,
    /// Per block; empty at [`TraceLevel::LogitsOnly`].
    pub last_token: Vec<BlockLastToken>,
    /// Per block; present only at [`TraceLevel::Full`].
    pub full: Option<Vec<BlockFull>>,
}

// ---------------------------------------------------------------------------
// Batched forward pass
// ---------------------------------------------------------------------------

/// Row-wise layer norm over a matrix; optionally keeps `x̂` and `1/σ`.
pub(crate) fn layer_norm_rows(
    x: &Matrix,
    gain: &[f64],
    bias: &[f64],
    eps: f64,
    keep: bool,
) -> (Matrix, Option<(Matrix, Vec<f64>)>) {
    let (rows, cols) = x.shape();
    let mut out = Matrix::zeros(rows, cols);
    let mut rstds = Vec::with_capacity(if keep { rows } else { 0 });
    let ones = vec![1.0; cols];
    let zeros = vec![0.0; cols];
    let mut xhat = if keep { Some(Matrix::zeros(rows, cols)) } else { None };
    for i in 0..rows {
        match xhat.as_mut() {
            Some(xh) => {
                let r = layer_norm_into(x.row(i), &ones, &zeros, eps, xh.row_mut(i));
                rstds.push(r);
                let o = out.row_mut(i);
                for (j, v) in xh.row(i).iter().enumerate() {
                    o[j] = v * gain[j] + bias[j];
                }
            }
            None => {
                layer_norm_into(x.row(i), gain, bias, eps, out.row_mut(i));
            }
        }
    }
    (out, xhat.map(|xh| (xh, rstds)))
}

pub(crate) fn add_row_bias(m: &mut Matrix, bias: &[f64]) {
    for i in 0..m.rows() {
        m.row_mut(i).iter_mut().zip(bias).for_each(|(v, b)| *v += b);
    }
}

/// Intermediates of one block kept for backpropagation.
pub(crate) struct BlockCache {
    pub short_circuit: bool,
    pub ln1_xhat: Matrix,
    pub ln1_rstd: Vec<f64>,
    pub h1: Matrix,
    pub q: Matrix,
    pub k: Matrix,
    pub v: Matrix,
    /// Attention probabilities, index `b * n_heads + h`; empty when short-circuited.
    pub probs: Vec<Matrix>,
    pub ctx: Matrix,
    pub ln2_xhat: Matrix,
    pub ln2_rstd: Vec<f64>,
    pub h2: Matrix,
    pub u: Matrix,
    pub g: Matrix,
}

pub(crate) struct BlockOutput {
    pub post_attn: Matrix,
    pub post_ffn: Matrix,
    pub probs: Vec<Matrix>,
    pub cache: Option<BlockCache>,
}

/// Runs one block over `batch` sequences of `seq_len` rows each, stacked in `x`.
///
/// `normalize = false` removes both layer norms; used only to line the block
/// up with the theorem abstraction in tests.
#[allow(clippy::too_many_arguments)]
pub(crate) fn block_forward(
    block: &BlockWeights,
    cfg: &ModelConfig,
    x: &Matrix,
    batch: usize,
    seq_len: usize,
    short_circuit: bool,
    normalize: bool,
    keep_probs: bool,
    keep_cache: bool,
) -> BlockOutput {
    let d = cfg.d_model;
    let n_heads = cfg.n_heads;
    let dk = cfg.d_head();
    let eps = cfg.layer_norm_eps;
    debug_assert_eq!(x.rows(), batch * seq_len);

    let (h1, ln1) = if normalize {
        layer_norm_rows(x, &block.ln1_gain, &block.ln1_bias, eps, keep_cache)
    } else {
        (x.clone(), None)
    };

    let v = matmul(&h1, &block.w_v).expect("w_v shape");
    let mut probs_all = Vec::new();
    let (q, k, ctx) = if short_circuit {
        // I · V per head: the context is the value matrix itself.
        (Matrix::zeros(0, 0), Matrix::zeros(0, 0), v.clone())
    } else {
        let q = matmul(&h1, &block.w_q).expect("w_q shape");
        let k = matmul(&h1, &block.w_k).expect("w_k shape");
        let mut ctx = Matrix::zeros(batch * seq_len, d);
        let scale = 1.0 / (dk as f64).sqrt();
        let want_probs = keep_probs || keep_cache;
        for b in 0..batch {
            let r0 = b * seq_len;
            for h in 0..n_heads {
                let c0 = h * dk;
                let mut scores = Matrix::zeros(seq_len, seq_len);
                gemm(
                    scale,
                    View::block(&q, r0, seq_len, c0, dk),
                    View::block(&k, r0, seq_len, c0, dk).t(),
                    0.0,
                    ViewMut::of(&mut scores),
                );
                for i in 0..seq_len {
                    let row = scores.row_mut(i);
                    softmax_in_place(&mut row[..=i]);
                    row[i + 1..].iter_mut().for_each(|v| *v = 0.0);
                }
                gemm(
                    1.0,
                    View::of(&scores),
                    View::block(&v, r0, seq_len, c0, dk),
                    0.0,
                    ViewMut::block(&mut ctx, r0, seq_len, c0, dk),
                );
                if want_probs {
                    probs_all.push(scores);
                }
            }
        }
        (q, k, ctx)
    };

    let mut post_attn = matmul(&ctx, &block.w_o).expect("w_o shape");
    post_attn.add_assign(x).expect("residual shape");

    let (h2, ln2) = if normalize {
        layer_norm_rows(&post_attn, &block.ln2_gain, &block.ln2_bias, eps, keep_cache)
    } else {
        (post_attn.clone(), None)
    };
    let mut u = matmul(&h2, &block.ffn_w1).expect("ffn_w1 shape");
    add_row_bias(&mut u, &block.ffn_b1);
    let mut g = u.clone();
    g.data_mut().iter_mut().for_each(|v| *v = gelu_scalar(*v));
    let mut post_ffn = matmul(&g, &block.ffn_w2).expect("ffn_w2 shape");
    add_row_bias(&mut post_ffn, &block.ffn_b2);
    post_ffn.add_assign(&post_attn).expect("residual shape");

    let cache = if keep_cache {
        let (ln1_xhat, ln1_rstd) = ln1.unwrap_or_else(|| (Matrix::zeros(0, 0), Vec::new()));
        let (ln2_xhat, ln2_rstd) = ln2.unwrap_or_else(|| (Matrix::zeros(0, 0), Vec::new()));
        Some(BlockCache {
            short_circuit,
            ln1_xhat,
            ln1_rstd,
            h1,
            q,
            k,
            v,
            probs: if keep_probs { probs_all.clone() } else { std::mem::take(&mut probs_all) },
            ctx,
            ln2_xhat,
            ln2_rstd,
            h2,
            u,
            g,
        })
    } else {
        None
    };

    BlockOutput {
        post_attn,
        post_ffn,
        probs: if keep_probs { probs_all } else { Vec::new() },
        cache,
    }
}

/// Output of [`forward_batch`].
pub(crate) struct BatchForward {
    /// `(batch * seq_len) x vocab_size`.
    pub logits: Matrix,
    pub blocks: Vec<BlockOutput>,
    pub final_xhat: Option<(Matrix, Vec<f64>)>,
    pub final_h: Option<Matrix>,
}

/// What [`forward_batch`] retains besides logits.
#[derive(Debug, Clone, Copy, Default)]
pub(crate) struct Retain {
    pub residuals: bool,
    pub attention: bool,
    pub backprop: bool,
}

pub(crate) fn check_tokens(cfg: &ModelConfig, tokens: &[u32]) -> Result<()> {
    if tokens.is_empty() {
        return Err(AscError::Input("token sequence is empty".into()));
    }
    if tokens.len() > cfg.max_seq_len {
        return Err(AscError::Input(format!(
            "sequence of length {} exceeds max_seq_len {}",
            tokens.len(),
            cfg.max_seq_len
        )));
    }
    if let Some((pos, t)) = tokens.iter().enumerate().find(|(_, &t)| t as usize >= cfg.vocab_size) {
        return Err(AscError::Input(format!(
            "token id {t} at position {pos} is outside the vocabulary of size {}",
            cfg.vocab_size
        )));
    }
    Ok(())
}

/// Forward pass over equal-length sequences stacked row-wise.
pub(crate) fn forward_batch(
    w: &TransformerWeights,
    cfg: &ModelConfig,
    seqs: &[&[u32]],
    spec: &InterventionSpec,
    retain: Retain,
) -> Result<BatchForward> {
    let batch = seqs.len();
    if batch == 0 {
        return Err(AscError::Input("empty batch".into()));
    }
    let seq_len = seqs[0].len();
    for s in seqs {
        if s.len() != seq_len {
            return Err(AscError::Input("sequences in a batch must share one length".into()));
        }
        check_tokens(cfg, s)?;
    }
    spec.check(cfg.n_layers)?;

    let d = cfg.d_model;
    let mut x = Matrix::zeros(batch * seq_len, d);
    for (b, s) in seqs.iter().enumerate() {
        for (t, &tok) in s.iter().enumerate() {
            let row = x.row_mut(b * seq_len + t);
            row.copy_from_slice(w.token_embedding.row(tok as usize));
            row.iter_mut()
                .zip(w.positional_embedding.row(t))
                .for_each(|(a, p)| *a += p);
        }
    }

    let mut blocks = Vec::with_capacity(cfg.n_layers);
    for (l, block) in w.blocks.iter().enumerate() {
        let out = block_forward(
            block,
            cfg,
            &x,
            batch,
            seq_len,
            spec.contains(l),
            true,
            retain.attention,
            retain.backprop,
        );
        x = out.post_ffn.clone();
        if retain.residuals || retain.attention || retain.backprop {
            blocks.push(out);
        }
    }

    let (hf, final_xhat) = layer_norm_rows(&x, &w.final_ln_gain, &w.final_ln_bias, cfg.layer_norm_eps, retain.backprop);
    let logits = matmul(&hf, &w.unembedding)?;
    Ok(BatchForward {
        logits,
        blocks,
        final_xhat,
        final_h: retain.backprop.then_some(hf),
    })
}

/// Full forward pass over one sequence.
pub fn forward(
    w: &TransformerWeights,
    cfg: &ModelConfig,
    tokens: &[u32],
    spec: &InterventionSpec,
    level: TraceLevel,
) -> Result<ForwardTrace> {
    let retain = Retain {
        residuals: level != TraceLevel::LogitsOnly,
        attention: level == TraceLevel::Full,
        backprop: false,
    };
    let out = forward_batch(w, cfg, &[tokens], spec, retain)?;
    let n = tokens.len();
    let last_token = if level == TraceLevel::LogitsOnly {
        Vec::new()
    } else {
        out.blocks
            .iter()
            .map(|b| BlockLastToken {
                post_attn: b.post_attn.row(n - 1).to_vec(),
                post_ffn: b.post_ffn.row(n - 1).to_vec(),
            })
            .collect()
    };
    let full = (level == TraceLevel::Full).then(|| {
        out.blocks
            .into_iter()
            .enumerate()
            .map(|(l, b)| BlockFull {
                attention: if spec.contains(l) {
                    (0..cfg.n_heads).map(|_| Matrix::identity(n)).collect()
                } else {
                    b.probs
                },
                post_attn: b.post_attn,
                post_ffn: b.post_ffn,
            })
            .collect()
    });
    Ok(ForwardTrace {
        logits: out.logits,
        last_token,
        full,
    })
}

// ---------------------------------------------------------------------------
// Incremental decoding
// ---------------------------------------------------------------------------

/// Lock-step incremental decoder over a batch of sequences, caching each
/// block's keys and values so a step costs one position per sequence.
pub struct Decoder<'a> {
    w: &'a TransformerWeights,
    cfg: &'a ModelConfig,
    spec: InterventionSpec,
    batch: usize,
    pos: usize,
    /// Per block: `(batch * max_seq_len) x d_model` key and value rows.
    keys: Vec<Matrix>,
    values: Vec<Matrix>,
}

impl<'a> Decoder<'a> {
    pub fn new(
        w: &'a TransformerWeights,
        cfg: &'a ModelConfig,
        spec: &InterventionSpec,
        batch: usize,
    ) -> Result<Self> {
        spec.check(cfg.n_layers)?;
        if batch == 0 {
            return Err(AscError::Input("decoder batch must be non-empty".into()));
        }
        let rows = batch * cfg.max_seq_len;
        let alloc = |l: usize| {
            if spec.contains(l) {
                Matrix::zeros(0, 0)
            } else {
                Matrix::zeros(rows, cfg.d_model)
            }
        };
        Ok(Self {
            w,
            cfg,
            spec: spec.clone(),
            batch,
            pos: 0,
            keys: (0..cfg.n_layers).map(alloc).collect(),
            values: (0..cfg.n_layers).map(alloc).collect(),
        })
    }

    /// Number of positions consumed so far.
    pub fn position(&self) -> usize {
        self.pos
    }

    /// Appends one token per sequence and returns the `batch x vocab_size`
    /// logits predicting the next position.
    pub fn step(&mut self, tokens: &[u32]) -> Result<Matrix> {
        let cfg = self.cfg;
        if tokens.len() != self.batch {
            return Err(AscError::Input(format!(
                "decoder step with {} tokens for batch {}",
                tokens.len(),
                self.batch
            )));
        }
        if self.pos >= cfg.max_seq_len {
            return Err(AscError::Input(format!(
                "decoder capacity of {} positions exhausted",
                cfg.max_seq_len
            )));
        }
        if let Some(&t) = tokens.iter().find(|&&t| t as usize >= cfg.vocab_size) {
            return Err(AscError::Input(format!(
                "token id {t} is outside the vocabulary of size {}",
                cfg.vocab_size
            )));
        }
        let d = cfg.d_model;
        let dk = cfg.d_head();
        let pos = self.pos;
        let scale = 1.0 / (dk as f64).sqrt();
        let mut x = Matrix::zeros(self.batch, d);
        for (b, &tok) in tokens.iter().enumerate() {
            let row = x.row_mut(b);
            row.copy_from_slice(self.w.token_embedding.row(tok as usize));
            row.iter_mut()
                .zip(self.w.positional_embedding.row(pos))
                .for_each(|(a, p)| *a += p);
        }

        for (l, block) in self.w.blocks.iter().enumerate() {
            let (h1, _) = layer_norm_rows(&x, &block.ln1_gain, &block.ln1_bias, cfg.layer_norm_eps, false);
            let v = matmul(&h1, &block.w_v)?;
            let ctx = if self.spec.contains(l) {
                v
            } else {
                let q = matmul(&h1, &block.w_q)?;
                let k = matmul(&h1, &block.w_k)?;
                let (keys, values) = (&mut self.keys[l], &mut self.values[l]);
                for b in 0..self.batch {
                    let r = b * cfg.max_seq_len + pos;
                    keys.row_mut(r).copy_from_slice(k.row(b));
                    values.row_mut(r).copy_from_slice(v.row(b));
                }
                let mut ctx = Matrix::zeros(self.batch, d);
                let mut scores = vec![0.0; pos + 1];
                for b in 0..self.batch {
                    let base = b * cfg.max_seq_len;
                    for h in 0..cfg.n_heads {
                        let c0 = h * dk;
                        let qh = &q.row(b)[c0..c0 + dk];
                        for (j, s) in scores.iter_mut().enumerate() {
                            let kh = &keys.row(base + j)[c0..c0 + dk];
                            *s = qh.iter().zip(kh).map(|(a, c)| a * c).sum::<f64>() * scale;
                        }
                        softmax_in_place(&mut scores);
                        let out = &mut ctx.row_mut(b)[c0..c0 + dk];
                        for (j, p) in scores.iter().enumerate() {
                            let vh = &values.row(base + j)[c0..c0 + dk];
                            out.iter_mut().zip(vh).for_each(|(o, vv)| *o += p * vv);
                        }
                    }
                }
                ctx
            };
            let mut post_attn = matmul(&ctx, &block.w_o)?;
            post_attn.add_assign(&x)?;
            let (h2, _) = layer_norm_rows(&post_attn, &block.ln2_gain, &block.ln2_bias, cfg.layer_norm_eps, false);
            let mut u = matmul(&h2, &block.ffn_w1)?;
            add_row_bias(&mut u, &block.ffn_b1);
            u.data_mut().iter_mut().for_each(|v| *v = gelu_scalar(*v));
            let mut out = matmul(&u, &block.ffn_w2)?;
            add_row_bias(&mut out, &block.ffn_b2);
            out.add_assign(&post_attn)?;
            x = out;
        }
        let (hf, _) = layer_norm_rows(&x, &self.w.final_ln_gain, &self.w.final_ln_bias, cfg.layer_norm_eps, false);
        self.pos += 1;
        matmul(&hf, &self.w.unembedding)
    }

    /// Feeds `prefixes` (equal lengths, one per sequence) and returns the
    /// logits after the last prefix position.
    pub fn prefill(&mut self, prefixes: &[&[u32]]) -> Result<Matrix> {
        let len = prefixes.first().map_or(0, |p| p.len());
        if len == 0 || prefixes.iter().any(|p| p.len() != len) {
            return Err(AscError::Input("prefixes must be non-empty and of equal length".into()));
        }
        let mut logits = Matrix::zeros(0, 0);
        let mut column = vec![0u32; prefixes.len()];
        for t in 0..len {
            for (c, p) in column.iter_mut().zip(prefixes) {
                *c = p[t];
            }
            logits = self.step(&column)?;
        }
        Ok(logits)
    }
}

// ---------------------------------------------------------------------------
// Generation
// ---------------------------------------------------------------------------

/// Index of the maximum; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate().skip(1) {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

/// The per-head value matrix is returned unchanged: `I · V`.
pub fn short_circuit_attention(v: &Matrix) -> Matrix {
    v.clone()
}

fn check_capacity(cfg: &ModelConfig, prefix_len: usize, n_new: usize) -> Result<()> {
    if prefix_len == 0 {
        return Err(AscError::Input("prefix must contain at least one token".into()));
    }
    if prefix_len + n_new > cfg.max_seq_len {
        return Err(AscError::Input(format!(
            "prefix of {prefix_len} plus {n_new} new tokens exceeds max_seq_len {}",
            cfg.max_seq_len
        )));
    }
    Ok(())
}

/// Greedy continuation of several equal-length prefixes in lock-step.
pub fn greedy_generate_batch(
    w: &TransformerWeights,
    cfg: &ModelConfig,
    prefixes: &[&[u32]],
    n_new: usize,
    spec: &InterventionSpec,
) -> Result<Vec<Vec<u32>>> {
    let Some(first) = prefixes.first() else {
        return Ok(Vec::new());
    };
    check_capacity(cfg, first.len(), n_new)?;
    for p in prefixes {
        check_tokens(cfg, p)?;
    }
    let mut out = vec![Vec::with_capacity(n_new); prefixes.len()];
    if n_new == 0 {
        return Ok(out);
    }
    let mut dec = Decoder::new(w, cfg, spec, prefixes.len())?;
    let mut logits = dec.prefill(prefixes)?;
    let mut next = vec![0u32; prefixes.len()];
    for step in 0..n_new {
        for (b, n) in next.iter_mut().enumerate() {
            *n = argmax(logits.row(b)) as u32;
            out[b].push(*n);
        }
        if step + 1 < n_new {
            logits = dec.step(&next)?;
        }
    }
    Ok(out)
}

/// Greedy decoding: `n_new` argmax tokens after `prefix`.
pub fn greedy_generate(
    w: &TransformerWeights,
    cfg: &ModelConfig,
    prefix: &[u32],
    n_new: usize,
    spec: &InterventionSpec,
) -> Result<Vec<u32>> {
    check_capacity(cfg, prefix.len(), n_new)?;
    Ok(greedy_generate_batch(w, cfg, &[prefix], n_new, spec)?.remove(0))
}

/// Temperature sampling from `softmax(logits / temperature)` with a seeded generator.
#[allow(clippy::too_many_arguments)]
pub fn sample_generate(
    w: &TransformerWeights,
    cfg: &ModelConfig,
    prefix: &[u32],
    n_new: usize,
    spec: &InterventionSpec,
    temperature: f64,
    rng_seed: u64,
) -> Result<Vec<u32>> {
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(AscError::Input(format!("temperature must be positive, got {temperature}")));
    }
    check_capacity(cfg, prefix.len(), n_new)?;
    check_tokens(cfg, prefix)?;
    let mut out = Vec::with_capacity(n_new);
    if n_new == 0 {
        return Ok(out);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let mut dec = Decoder::new(w, cfg, spec, 1)?;
    let mut logits = dec.prefill(&[prefix])?;
    for step in 0..n_new {
        let tok = sample_token(logits.row(0), temperature, &mut rng) as u32;
        out.push(tok);
        if step + 1 < n_new {
            logits = dec.step(&[tok])?;
        }
    }
    Ok(out)
}

/// Draws one index from `softmax(logits / temperature)`.
pub fn sample_token<R: rand::Rng + ?Sized>(logits: &[f64], temperature: f64, rng: &mut R) -> usize {
    let mut p: Vec<f64> = logits.iter().map(|z| z / temperature).collect();
    softmax_in_place(&mut p);
    match WeightedIndex::new(&p) {
        Ok(dist) => dist.sample(rng),
        // All mass underflowed onto one entry.
        Err(_) => argmax(logits),
    }
}
