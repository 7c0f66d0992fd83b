// SPDX-License-Identifier: MIT OR Apache-2.0

//! Numeric verification of the output-difference bounds for identity
//! attention.
//!
//! Theorem blocks follow the proofs' abstraction: column vectors, no
//! value/output projections, no layer norm. For input rows `x_1..x_n` and
//! attention weights `α`,
//!
//! ```text
//! standard:  z = Σ α_i x_i + x_n,  v = z + FFN(z)
//! identity:  z = 2 x_n,            v = z + FFN(z)
//! ```
//!
//! The FFN is written as `W z + ε(z)` with `W` its linear part, so the error
//! terms in the bounds are measured exactly rather than estimated.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize, Serializer};

use crate::error::{AscError, Result};
use crate::seed::derive_seed;
use crate::tensor::{gelu, matmul, operator_norm_with, softmax_in_place, Matrix};

/// Absolute slack allowed between a measured norm and its bound.
pub const BOUND_SLACK: f64 = 1e-9;
/// Power-iteration tolerance for `‖W‖`; far below [`BOUND_SLACK`] in effect.
const NORM_TOL: f64 = 1e-13;
const NORM_MAX_ITER: usize = 200_000;

/// Feed-forward map of a theorem block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "activation", rename_all = "snake_case")]
pub enum Ffn {
    /// `FFN(z) = W z`; the approximation error is identically zero.
    Identity { w: Matrix },
    /// `FFN(z) = W2 gelu(W1 z)` with linear part `W = W2 W1`.
    Gelu { w1: Matrix, w2: Matrix },
}

/// Attention weights of a theorem block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum AttentionMode {
    /// Causal softmax of `(W_Q x_i)·(W_K x_j) / sqrt(d_k)`.
    Softmax { wq: Matrix, wk: Matrix },
    /// Explicit causal row-stochastic `n × n` weights; row `i` attends over
    /// positions `0..=i`.
    Injected { weights: Matrix },
}

impl AttentionMode {
    /// Injected weights whose last row is `alpha` and whose earlier rows put
    /// all mass on the token itself.
    pub fn from_last_row(alpha: &[f64]) -> Result<Self> {
        let n = alpha.len();
        if n == 0 {
            return Err(AscError::Input("attention row must be non-empty".into()));
        }
        let mut weights = Matrix::identity(n);
        weights.row_mut(n - 1).copy_from_slice(alpha);
        let mode = AttentionMode::Injected { weights };
        mode.validate_injected()?;
        Ok(mode)
    }

    fn validate_injected(&self) -> Result<()> {
        let AttentionMode::Injected { weights } = self else {
            return Ok(());
        };
        let (n, m) = weights.shape();
        if n != m {
            return Err(AscError::Shape(format!("injected attention must be square, got {n}x{m}")));
        }
        for i in 0..n {
            let row = weights.row(i);
            if row.iter().any(|a| !a.is_finite() || *a < 0.0) {
                return Err(AscError::Input(format!("attention row {i} has a negative or non-finite weight")));
            }
            if row[i + 1..].iter().any(|a| *a != 0.0) {
                return Err(AscError::Input(format!("attention row {i} attends to future positions")));
            }
            let s: f64 = row.iter().sum();
            if (s - 1.0).abs() > 1e-12 {
                return Err(AscError::Input(format!("attention row {i} sums to {s}, not 1")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TheoremBlock {
    pub ffn: Ffn,
    pub attention: AttentionMode,
}

/// Which attention the last token uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalMode {
    Standard,
    IdentityAttention,
}

impl TheoremBlock {
    pub fn new(ffn: Ffn, attention: AttentionMode) -> Result<Self> {
        let b = Self { ffn, attention };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.dim();
        match &self.ffn {
            Ffn::Identity { w } => {
                if w.rows() != w.cols() {
                    return Err(AscError::Shape(format!("W must be square, got {:?}", w.shape())));
                }
            }
            Ffn::Gelu { w1, w2 } => {
                if w1.cols() != d || w2.rows() != d || w2.cols() != w1.rows() {
                    return Err(AscError::Shape(format!(
                        "gelu FFN shapes W1 {:?}, W2 {:?} do not compose",
                        w1.shape(),
                        w2.shape()
                    )));
                }
            }
        }
        match &self.attention {
            AttentionMode::Softmax { wq, wk } => {
                if wq.cols() != d || wk.cols() != d || wq.rows() != wk.rows() || wq.rows() == 0 {
                    return Err(AscError::Shape(format!(
                        "W_Q {:?} and W_K {:?} must both be d_k x {d}",
                        wq.shape(),
                        wk.shape()
                    )));
                }
            }
            AttentionMode::Injected { .. } => self.attention.validate_injected()?,
        }
        Ok(())
    }

    /// Model width `d`.
    pub fn dim(&self) -> usize {
        match &self.ffn {
            Ffn::Identity { w } => w.cols(),
            Ffn::Gelu { w1, .. } => w1.cols(),
        }
    }

    /// Linear part `W` of the FFN.
    pub fn linear_part(&self) -> Matrix {
        match &self.ffn {
            Ffn::Identity { w } => w.clone(),
            Ffn::Gelu { w1, w2 } => matmul(w2, w1).expect("validated shapes"),
        }
    }

    /// `FFN(z)`.
    pub fn ffn(&self, z: &[f64]) -> Vec<f64> {
        match &self.ffn {
            Ffn::Identity { w } => w.matvec(z).expect("validated shapes"),
            Ffn::Gelu { w1, w2 } => w2.matvec(&gelu(&w1.matvec(z).expect("validated shapes"))).expect("validated shapes"),
        }
    }

    /// `ε(z) = FFN(z) - W z`; exactly zero for the identity activation.
    pub fn approximation_error(&self, z: &[f64], w: &Matrix) -> Vec<f64> {
        match &self.ffn {
            Ffn::Identity { .. } => vec![0.0; z.len()],
            Ffn::Gelu { .. } => {
                let wz = w.matvec(z).expect("validated shapes");
                self.ffn(z).iter().zip(&wz).map(|(a, b)| a - b).collect()
            }
        }
    }

    fn check_input(&self, x: &Matrix) -> Result<()> {
        if x.rows() == 0 {
            return Err(AscError::Input("theorem block needs at least one input row".into()));
        }
        if x.cols() != self.dim() {
            return Err(AscError::Shape(format!("input width {} but block width {}", x.cols(), self.dim())));
        }
        if let AttentionMode::Injected { weights } = &self.attention {
            if weights.rows() != x.rows() {
                return Err(AscError::Shape(format!(
                    "injected attention covers {} positions but input has {}",
                    weights.rows(),
                    x.rows()
                )));
            }
        }
        Ok(())
    }

    /// Full `n × n` causal attention weights on input `x`.
    pub fn attention_weights(&self, x: &Matrix) -> Result<Matrix> {
        self.check_input(x)?;
        match &self.attention {
            AttentionMode::Injected { weights } => Ok(weights.clone()),
            AttentionMode::Softmax { wq, wk } => {
                let n = x.rows();
                let scale = 1.0 / (wq.rows() as f64).sqrt();
                let q: Vec<Vec<f64>> = (0..n).map(|i| wq.matvec(x.row(i))).collect::<Result<_>>()?;
                let k: Vec<Vec<f64>> = (0..n).map(|i| wk.matvec(x.row(i))).collect::<Result<_>>()?;
                let mut a = Matrix::zeros(n, n);
                for i in 0..n {
                    let row = &mut a.row_mut(i)[..=i];
                    for (j, s) in row.iter_mut().enumerate() {
                        *s = q[i].iter().zip(&k[j]).map(|(p, r)| p * r).sum::<f64>() * scale;
                    }
                    softmax_in_place(row);
                }
                Ok(a)
            }
        }
    }
}

/// Pre-FFN vector `z` of position `i` under `weights`.
fn attention_sum(x: &Matrix, weights: &Matrix, i: usize, mode: EvalMode) -> Vec<f64> {
    let mut z = x.row(i).to_vec();
    match mode {
        EvalMode::IdentityAttention => z.iter_mut().for_each(|v| *v *= 2.0),
        EvalMode::Standard => {
            for (j, &a) in weights.row(i)[..=i].iter().enumerate() {
                z.iter_mut().zip(x.row(j)).for_each(|(zv, xv)| *zv += a * xv);
            }
        }
    }
    z
}

fn block_output(b: &TheoremBlock, z: &[f64]) -> Vec<f64> {
    z.iter().zip(b.ffn(z)).map(|(a, f)| a + f).collect()
}

/// Last-token output of `b` on rows `x`.
pub fn eval_theorem_block(b: &TheoremBlock, x: &Matrix, mode: EvalMode) -> Result<Vec<f64>> {
    let weights = b.attention_weights(x)?;
    Ok(block_output(b, &attention_sum(x, &weights, x.rows() - 1, mode)))
}

/// Standard-attention outputs of every position under fixed `weights`.
fn eval_all(b: &TheoremBlock, x: &Matrix, weights: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(x.rows(), x.cols());
    for i in 0..x.rows() {
        out.row_mut(i).copy_from_slice(&block_output(b, &attention_sum(x, weights, i, EvalMode::Standard)));
    }
    out
}

fn diff_norm(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(p, q)| (p - q) * (p - q)).sum::<f64>().sqrt()
}

/// `max_{i<n} ‖x_n − x_i‖`, zero for a single row.
fn max_spread(x: &Matrix) -> f64 {
    let n = x.rows();
    (0..n - 1).map(|i| diff_norm(x.row(n - 1), x.row(i))).fold(0.0, f64::max)
}

fn spectral_norm(w: &Matrix) -> Result<f64> {
    operator_norm_with(w, NORM_TOL, NORM_MAX_ITER)
}

// ---------------------------------------------------------------------------
// Reports
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RhsTerms {
    /// `1 + ‖W‖` of the layer whose attention is replaced.
    pub w_norm_factor: f64,
    #[serde(rename = "M")]
    pub m: f64,
    /// `1 − α_n`, summed as `Σ_{i<n} α_i`.
    pub one_minus_alpha: f64,
    /// `‖ε_IA − ε‖` of the layer whose attention is replaced.
    pub eps_diff_norm: f64,
    /// Propagation to the next layer (replacement one layer below only).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub propagation: Option<Propagation>,
}

/// Extra factors when the difference is carried through one more block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Propagation {
    /// `1 + ‖W^{L+1}‖`.
    pub w_norm_factor: f64,
    /// `1 + α_n^{L+1}`.
    pub alpha_factor: f64,
    /// `‖ε^{L+1}_{IA,L} − ε^{L+1}‖`.
    pub eps_diff_norm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub measured_d_norm: f64,
    pub rhs_terms: RhsTerms,
    pub rhs_total: f64,
    pub holds: bool,
    /// `rhs_total − measured_d_norm`.
    pub slack: f64,
}

impl BoundReport {
    fn new(measured: f64, terms: RhsTerms) -> Self {
        let local = terms.w_norm_factor * terms.m * terms.one_minus_alpha + terms.eps_diff_norm;
        let rhs_total = match &terms.propagation {
            None => local,
            Some(p) => p.w_norm_factor * p.alpha_factor * local + p.eps_diff_norm,
        };
        Self {
            measured_d_norm: measured,
            rhs_total,
            holds: measured <= rhs_total + BOUND_SLACK,
            slack: rhs_total - measured,
            rhs_terms: terms,
        }
    }
}

struct LayerPieces {
    w: Matrix,
    w_norm: f64,
    one_minus_alpha: f64,
    alpha_n: f64,
    /// `z` and `z_IA` of the last token.
    z: Vec<f64>,
    z_ia: Vec<f64>,
}

fn layer_pieces(b: &TheoremBlock, x: &Matrix, weights: &Matrix) -> Result<LayerPieces> {
    let n = x.rows();
    let w = b.linear_part();
    let w_norm = spectral_norm(&w)?;
    let last = weights.row(n - 1);
    Ok(LayerPieces {
        w_norm,
        one_minus_alpha: last[..n - 1].iter().sum(),
        alpha_n: last[n - 1],
        z: attention_sum(x, weights, n - 1, EvalMode::Standard),
        z_ia: attention_sum(x, weights, n - 1, EvalMode::IdentityAttention),
        w,
    })
}

/// Single-block bound:
/// `‖v_IA − v‖ ≤ (1 + ‖W‖)·M·(1 − α_n) + ‖ε_IA − ε‖`.
pub fn theorem1_check(b: &TheoremBlock, x: &Matrix) -> Result<BoundReport> {
    b.validate()?;
    let weights = b.attention_weights(x)?;
    let p = layer_pieces(b, x, &weights)?;
    let v = block_output(b, &p.z);
    let v_ia = block_output(b, &p.z_ia);
    let eps = b.approximation_error(&p.z, &p.w);
    let eps_ia = b.approximation_error(&p.z_ia, &p.w);
    Ok(BoundReport::new(
        diff_norm(&v_ia, &v),
        RhsTerms {
            w_norm_factor: 1.0 + p.w_norm,
            m: max_spread(x),
            one_minus_alpha: p.one_minus_alpha,
            eps_diff_norm: diff_norm(&eps_ia, &eps),
            propagation: None,
        },
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Theorem2Report {
    /// Attention replaced at layer `L`, measured at the output of `L + 1`.
    pub case_replace_at_l: BoundReport,
    /// Attention replaced at layer `L + 1`.
    pub case_replace_at_l1: BoundReport,
}

/// Two-block bounds for blocks `b_l` then `b_l1` on input rows `x`.
///
/// In the first case only the last token's output of layer `L` is replaced
/// by its identity-attention value, and the attention weights of layer
/// `L + 1` are those of the unmodified path, held fixed.
pub fn theorem2_check(b_l: &TheoremBlock, b_l1: &TheoremBlock, x: &Matrix) -> Result<Theorem2Report> {
    b_l.validate()?;
    b_l1.validate()?;
    if b_l.dim() != b_l1.dim() {
        return Err(AscError::Shape(format!(
            "blocks of width {} and {} do not compose",
            b_l.dim(),
            b_l1.dim()
        )));
    }
    let n = x.rows();
    let weights_l = b_l.attention_weights(x)?;
    let lower = layer_pieces(b_l, x, &weights_l)?;
    let v_l = eval_all(b_l, x, &weights_l);
    let mut v_l_ia = v_l.clone();
    v_l_ia.row_mut(n - 1).copy_from_slice(&block_output(b_l, &lower.z_ia));
    let eps_l = b_l.approximation_error(&lower.z, &lower.w);
    let eps_l_ia = b_l.approximation_error(&lower.z_ia, &lower.w);

    let weights_l1 = b_l1.attention_weights(&v_l)?;
    let upper = layer_pieces(b_l1, &v_l, &weights_l1)?;
    let v_l1 = block_output(b_l1, &upper.z);
    let eps_l1 = b_l1.approximation_error(&upper.z, &upper.w);

    // Case 1: perturbed input, frozen weights.
    let z_case1 = attention_sum(&v_l_ia, &weights_l1, n - 1, EvalMode::Standard);
    let v_case1 = block_output(b_l1, &z_case1);
    let eps_case1 = b_l1.approximation_error(&z_case1, &upper.w);
    let case_replace_at_l = BoundReport::new(
        diff_norm(&v_case1, &v_l1),
        RhsTerms {
            w_norm_factor: 1.0 + lower.w_norm,
            m: max_spread(x),
            one_minus_alpha: lower.one_minus_alpha,
            eps_diff_norm: diff_norm(&eps_l_ia, &eps_l),
            propagation: Some(Propagation {
                w_norm_factor: 1.0 + upper.w_norm,
                alpha_factor: 1.0 + upper.alpha_n,
                eps_diff_norm: diff_norm(&eps_case1, &eps_l1),
            }),
        },
    );

    // Case 2: identity attention at L + 1 on the unmodified layer-L output.
    let v_case2 = block_output(b_l1, &upper.z_ia);
    let eps_case2 = b_l1.approximation_error(&upper.z_ia, &upper.w);
    let case_replace_at_l1 = BoundReport::new(
        diff_norm(&v_case2, &v_l1),
        RhsTerms {
            w_norm_factor: 1.0 + upper.w_norm,
            m: max_spread(&v_l),
            one_minus_alpha: upper.one_minus_alpha,
            eps_diff_norm: diff_norm(&eps_case2, &eps_l1),
            propagation: None,
        },
    );
    Ok(Theorem2Report {
        case_replace_at_l,
        case_replace_at_l1,
    })
}

// ---------------------------------------------------------------------------
// Randomized trials
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrialDims {
    /// Sequence length is drawn from `1..=max_tokens`.
    pub max_tokens: usize,
    /// Width is drawn from `1..=max_dim`.
    pub max_dim: usize,
    /// `‖W‖` is drawn from `[0, max_w_norm]`.
    pub max_w_norm: f64,
}

impl Default for TrialDims {
    fn default() -> Self {
        Self {
            max_tokens: 8,
            max_dim: 16,
            max_w_norm: 3.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Identity,
    Gelu,
}

fn normal_matrix(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix {
    Matrix::random_normal(rows, cols, 1.0, rng)
}

fn random_ffn(d: usize, activation: Activation, dims: &TrialDims, rng: &mut ChaCha8Rng) -> Result<Ffn> {
    let target = rng.gen_range(0.0..=dims.max_w_norm);
    Ok(match activation {
        Activation::Identity => {
            let mut w = normal_matrix(d, d, rng);
            let norm = spectral_norm(&w)?;
            if norm > 0.0 {
                w.scale(target / norm);
            }
            Ffn::Identity { w }
        }
        Activation::Gelu => {
            let d_ff = 2 * d;
            let mut w1 = normal_matrix(d_ff, d, rng);
            let mut w2 = normal_matrix(d, d_ff, rng);
            let norm = spectral_norm(&matmul(&w2, &w1)?)?;
            if norm > 0.0 {
                let s = (target / norm).sqrt();
                w1.scale(s);
                w2.scale(s);
            }
            Ffn::Gelu { w1, w2 }
        }
    })
}

/// Random causal row-stochastic weights. Some rows are made sparse so that
/// `α_n = 1` and near-one cases are exercised.
fn random_attention(n: usize, rng: &mut ChaCha8Rng) -> Matrix {
    let mut a = Matrix::zeros(n, n);
    for i in 0..n {
        let row = &mut a.row_mut(i)[..=i];
        if rng.gen_bool(0.1) {
            row[i] = 1.0;
            continue;
        }
        for v in row.iter_mut() {
            *v = Exp1.sample(rng);
        }
        let s: f64 = row.iter().sum();
        row.iter_mut().for_each(|v| *v /= s);
    }
    a
}

fn random_input(n: usize, d: usize, rng: &mut ChaCha8Rng) -> Matrix {
    let scale: f64 = rng.gen_range(0.1..3.0);
    let data = (0..n * d)
        .map(|_| {
        let z: f64 = StandardNormal.sample(rng);
        scale * z
    }).collect::<Vec<f64>>();
    Matrix::from_vec(n, d, data).expect("sized")
}

/// A random block pair with injected attention and its input rows.
pub fn random_trial(dims: &TrialDims, activation: Activation, seed: u64) -> Result<(TheoremBlock, TheoremBlock, Matrix)> {
    if dims.max_tokens == 0 || dims.max_dim == 0 || !(dims.max_w_norm >= 0.0) {
        return Err(AscError::Input(format!("invalid trial dimensions {dims:?}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.gen_range(1..=dims.max_tokens);
    let d = rng.gen_range(1..=dims.max_dim);
    let x = random_input(n, d, &mut rng);
    let b_l = TheoremBlock::new(
        random_ffn(d, activation, dims, &mut rng)?,
        AttentionMode::Injected {
            weights: random_attention(n, &mut rng),
        },
    )?;
    let b_l1 = TheoremBlock::new(
        random_ffn(d, activation, dims, &mut rng)?,
        AttentionMode::Injected {
            weights: random_attention(n, &mut rng),
        },
    )?;
    Ok((b_l, b_l1, x))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub trial: usize,
    pub root_seed: u64,
    pub trial_seed: u64,
    pub n_tokens: usize,
    pub dim: usize,
    pub theorem1: BoundReport,
    pub theorem2: Theorem2Report,
}

impl TrialRecord {
    pub fn all_hold(&self) -> bool {
        self.theorem1.holds && self.theorem2.case_replace_at_l.holds && self.theorem2.case_replace_at_l1.holds
    }
}

/// Runs `trials` random trials in parallel; results are in trial order and
/// depend only on `root_seed`.
pub fn run_trials(trials: usize, dims: &TrialDims, activation: Activation, root_seed: u64) -> Result<Vec<TrialRecord>> {
    (0..trials)
        .into_par_iter()
        .map(|trial| {
            let trial_seed = derive_seed(root_seed, &format!("bounds-trial-{trial}"));
            let (b_l, b_l1, x) = random_trial(dims, activation, trial_seed)?;
            Ok(TrialRecord {
                trial,
                root_seed,
                trial_seed,
                n_tokens: x.rows(),
                dim: x.cols(),
                theorem1: theorem1_check(&b_l, &x)?,
                theorem2: theorem2_check(&b_l, &b_l1, &x)?,
            })
        })
        .collect()
}

/// One JSON object per line.
pub fn write_json_lines<W: Write, T: Serialize>(mut out: W, items: &[T]) -> Result<()> {
    for item in items {
        serde_json::to_writer(&mut out, item)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Depth gap
// ---------------------------------------------------------------------------

/// A ratio that may be `0/0`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Ratio {
    Value(f64),
    /// Numerator and denominator both zero.
    Degenerate,
}

impl Ratio {
    pub fn of(num: f64, den: f64) -> Self {
        if den == 0.0 && num == 0.0 {
            Ratio::Degenerate
        } else {
            Ratio::Value(num / den)
        }
    }

    pub fn value(self) -> Option<f64> {
        match self {
            Ratio::Value(v) => Some(v),
            Ratio::Degenerate => None,
        }
    }
}

impl Serialize for Ratio {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            Ratio::Value(v) if v.is_finite() => s.serialize_f64(*v),
            Ratio::Value(_) => s.serialize_str("infinite"),
            Ratio::Degenerate => s.serialize_str("degenerate"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DepthGapTrial {
    pub trial: usize,
    /// `‖D^{L+1}_{IA,L}‖ / ‖D^{L+1}_{IA,L+1}‖`.
    pub measured_ratio: Ratio,
    /// Ratio of the two right-hand sides.
    pub rhs_ratio: Ratio,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DepthGapSummary {
    pub root_seed: u64,
    pub trials: usize,
    pub degenerate: usize,
    /// Median over finite, non-degenerate measured ratios.
    pub median_measured_ratio: Option<f64>,
    pub median_rhs_ratio: Option<f64>,
    /// Share of finite measured ratios above one.
    pub fraction_measured_above_one: Option<f64>,
    pub per_trial: Vec<DepthGapTrial>,
}

fn median(mut xs: Vec<f64>) -> Option<f64> {
    if xs.is_empty() {
        return None;
    }
    xs.sort_by(f64::total_cmp);
    let m = xs.len() / 2;
    Some(if xs.len() % 2 == 1 { xs[m] } else { 0.5 * (xs[m - 1] + xs[m]) })
}

/// Summarizes the two-block reports of `records`.
pub fn depth_gap_from(records: &[TrialRecord], root_seed: u64) -> DepthGapSummary {
    let per_trial: Vec<DepthGapTrial> = records
        .iter()
        .map(|r| DepthGapTrial {
            trial: r.trial,
            measured_ratio: Ratio::of(r.theorem2.case_replace_at_l.measured_d_norm, r.theorem2.case_replace_at_l1.measured_d_norm),
            rhs_ratio: Ratio::of(r.theorem2.case_replace_at_l.rhs_total, r.theorem2.case_replace_at_l1.rhs_total),
        })
        .collect();
    let finite = |f: fn(&DepthGapTrial) -> Ratio| -> Vec<f64> {
        per_trial.iter().filter_map(|t| f(t).value()).filter(|v| v.is_finite()).collect()
    };
    let measured = finite(|t| t.measured_ratio);
    let rhs = finite(|t| t.rhs_ratio);
    let above = (!measured.is_empty()).then(|| measured.iter().filter(|v| **v > 1.0).count() as f64 / measured.len() as f64);
    DepthGapSummary {
        root_seed,
        trials: records.len(),
        degenerate: per_trial.iter().filter(|t| t.measured_ratio == Ratio::Degenerate).count(),
        median_measured_ratio: median(measured),
        median_rhs_ratio: median(rhs),
        fraction_measured_above_one: above,
        per_trial,
    }
}

/// Distribution of Case-1 over Case-2 output differences on random
/// identity-activation pairs. Descriptive only; nothing is asserted.
pub fn depth_gap_report(trials: usize, dims: &TrialDims, seed: u64) -> Result<DepthGapSummary> {
    if trials == 0 {
        return Err(AscError::Input("depth_gap_report needs at least one trial".into()));
    }
    let records = run_trials(trials, dims, Activation::Identity, seed)?;
    Ok(depth_gap_from(&records, seed))
}
