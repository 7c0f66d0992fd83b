// SPDX-License-Identifier: MIT OR Apache-2.0

//! Hand-written reverse pass for exactly the operations the model uses.

use crate::error::Result;
use crate::model::{forward_batch, BlockCache, BlockWeights, InterventionSpec, ModelConfig, Retain, TransformerWeights};
use crate::tensor::{gelu_grad_scalar, gemm, log_sum_exp, matmul_nt, Matrix, View, ViewMut};

/// `grad += aᵀ · b`.
fn accumulate_tn(grad: &mut Matrix, a: &Matrix, b: &Matrix) {
    gemm(1.0, View::of(a).t(), View::of(b), 1.0, ViewMut::of(grad));
}

fn accumulate_col_sums(grad: &mut [f64], m: &Matrix) {
    for i in 0..m.rows() {
        grad.iter_mut().zip(m.row(i)).for_each(|(g, v)| *g += v);
    }
}

/// Backward through `y = x̂ * gain + bias` with `x̂ = (x - μ) / σ`.
fn layer_norm_backward(
    dy: &Matrix,
    xhat: &Matrix,
    rstd: &[f64],
    gain: &[f64],
    dgain: &mut [f64],
    dbias: &mut [f64],
) -> Matrix {
    let (rows, cols) = dy.shape();
    let n = cols as f64;
    let mut dx = Matrix::zeros(rows, cols);
    let mut dxhat = vec![0.0; cols];
    for i in 0..rows {
        let dyr = dy.row(i);
        let xr = xhat.row(i);
        let mut mean_d = 0.0;
        let mut mean_dx = 0.0;
        for j in 0..cols {
            dgain[j] += dyr[j] * xr[j];
            dbias[j] += dyr[j];
            dxhat[j] = dyr[j] * gain[j];
            mean_d += dxhat[j];
            mean_dx += dxhat[j] * xr[j];
        }
        mean_d /= n;
        mean_dx /= n;
        let out = dx.row_mut(i);
        for j in 0..cols {
            out[j] = rstd[i] * (dxhat[j] - mean_d - xr[j] * mean_dx);
        }
    }
    dx
}

/// Backward through one block. Returns the gradient w.r.t. the block input.
fn block_backward(
    block: &BlockWeights,
    cache: &BlockCache,
    cfg: &ModelConfig,
    batch: usize,
    seq_len: usize,
    d_out: &Matrix,
    grad: &mut BlockWeights,
) -> Matrix {
    let dk = cfg.d_head();
    let scale = 1.0 / (dk as f64).sqrt();

    // FFN: out = post_attn + gelu(h2·W1 + b1)·W2 + b2
    accumulate_tn(&mut grad.ffn_w2, &cache.g, d_out);
    accumulate_col_sums(&mut grad.ffn_b2, d_out);
    let mut du = matmul_nt(d_out, &block.ffn_w2).expect("ffn_w2 shape");
    du.data_mut()
        .iter_mut()
        .zip(cache.u.data())
        .for_each(|(g, u)| *g *= gelu_grad_scalar(*u));
    accumulate_tn(&mut grad.ffn_w1, &cache.h2, &du);
    accumulate_col_sums(&mut grad.ffn_b1, &du);
    let dh2 = matmul_nt(&du, &block.ffn_w1).expect("ffn_w1 shape");
    let mut d_post_attn = layer_norm_backward(
        &dh2,
        &cache.ln2_xhat,
        &cache.ln2_rstd,
        &block.ln2_gain,
        &mut grad.ln2_gain,
        &mut grad.ln2_bias,
    );
    d_post_attn.add_assign(d_out).expect("residual shape");

    // Attention: post_attn = x + ctx·W_O
    accumulate_tn(&mut grad.w_o, &cache.ctx, &d_post_attn);
    let dctx = matmul_nt(&d_post_attn, &block.w_o).expect("w_o shape");

    let dh1 = if cache.short_circuit {
        accumulate_tn(&mut grad.w_v, &cache.h1, &dctx);
        matmul_nt(&dctx, &block.w_v).expect("w_v shape")
    } else {
        let rows = batch * seq_len;
        let d = cfg.d_model;
        let mut dq = Matrix::zeros(rows, d);
        let mut dkm = Matrix::zeros(rows, d);
        let mut dv = Matrix::zeros(rows, d);
        let mut dp = Matrix::zeros(seq_len, seq_len);
        for b in 0..batch {
            let r0 = b * seq_len;
            for h in 0..cfg.n_heads {
                let c0 = h * dk;
                let p = &cache.probs[b * cfg.n_heads + h];
                let dout = View::block(&dctx, r0, seq_len, c0, dk);
                // dV_h = Pᵀ · dout ; dP = dout · V_hᵀ
                gemm(1.0, View::of(p).t(), dout, 0.0, ViewMut::block(&mut dv, r0, seq_len, c0, dk));
                gemm(
                    1.0,
                    dout,
                    View::block(&cache.v, r0, seq_len, c0, dk).t(),
                    0.0,
                    ViewMut::of(&mut dp),
                );
                // Softmax backward; masked entries have p = 0 and drop out.
                for i in 0..seq_len {
                    let pr = p.row(i);
                    let dr = dp.row_mut(i);
                    let dotp: f64 = pr[..=i].iter().zip(&dr[..=i]).map(|(a, b)| a * b).sum();
                    for j in 0..=i {
                        dr[j] = pr[j] * (dr[j] - dotp);
                    }
                    dr[i + 1..].iter_mut().for_each(|v| *v = 0.0);
                }
                gemm(
                    scale,
                    View::of(&dp),
                    View::block(&cache.k, r0, seq_len, c0, dk),
                    0.0,
                    ViewMut::block(&mut dq, r0, seq_len, c0, dk),
                );
                gemm(
                    scale,
                    View::of(&dp).t(),
                    View::block(&cache.q, r0, seq_len, c0, dk),
                    0.0,
                    ViewMut::block(&mut dkm, r0, seq_len, c0, dk),
                );
            }
        }
        accumulate_tn(&mut grad.w_q, &cache.h1, &dq);
        accumulate_tn(&mut grad.w_k, &cache.h1, &dkm);
        accumulate_tn(&mut grad.w_v, &cache.h1, &dv);
        let mut dh1 = matmul_nt(&dq, &block.w_q).expect("w_q shape");
        gemm(1.0, View::of(&dkm), View::of(&block.w_k).t(), 1.0, ViewMut::of(&mut dh1));
        gemm(1.0, View::of(&dv), View::of(&block.w_v).t(), 1.0, ViewMut::of(&mut dh1));
        dh1
    };

    let mut dx = layer_norm_backward(
        &dh1,
        &cache.ln1_xhat,
        &cache.ln1_rstd,
        &block.ln1_gain,
        &mut grad.ln1_gain,
        &mut grad.ln1_bias,
    );
    dx.add_assign(&d_post_attn).expect("residual shape");
    dx
}

/// Mean next-token cross-entropy of `targets` given `inputs` (equal-length
/// rows), accumulating its gradient into `grad`.
pub(crate) fn loss_and_grad(
    w: &TransformerWeights,
    cfg: &ModelConfig,
    inputs: &[&[u32]],
    targets: &[&[u32]],
    spec: &InterventionSpec,
    grad: &mut TransformerWeights,
) -> Result<f64> {
    let batch = inputs.len();
    let seq_len = inputs[0].len();
    let fwd = forward_batch(
        w,
        cfg,
        inputs,
        spec,
        Retain {
            backprop: true,
            ..Retain::default()
        },
    )?;
    let n = (batch * seq_len) as f64;
    let mut dlogits = fwd.logits;
    let mut loss = 0.0;
    for b in 0..batch {
        for t in 0..seq_len {
            let row = dlogits.row_mut(b * seq_len + t);
            let target = targets[b][t] as usize;
            let lse = log_sum_exp(row);
            loss -= row[target] - lse;
            for v in row.iter_mut() {
                *v = (*v - lse).exp() / n;
            }
            row[target] -= 1.0 / n;
        }
    }
    loss /= n;

    let hf = fwd.final_h.expect("retained final activations");
    accumulate_tn(&mut grad.unembedding, &hf, &dlogits);
    let dhf = matmul_nt(&dlogits, &w.unembedding)?;
    let (fxhat, frstd) = fwd.final_xhat.expect("retained final layer norm");
    let mut dx = layer_norm_backward(
        &dhf,
        &fxhat,
        &frstd,
        &w.final_ln_gain,
        &mut grad.final_ln_gain,
        &mut grad.final_ln_bias,
    );

    for (l, out) in fwd.blocks.iter().enumerate().rev() {
        let cache = out.cache.as_ref().expect("retained block cache");
        dx = block_backward(&w.blocks[l], cache, cfg, batch, seq_len, &dx, &mut grad.blocks[l]);
    }

    for (b, seq) in inputs.iter().enumerate() {
        for (t, &tok) in seq.iter().enumerate() {
            let row = dx.row(b * seq_len + t);
            grad.token_embedding
                .row_mut(tok as usize)
                .iter_mut()
                .zip(row)
                .for_each(|(g, v)| *g += v);
            grad.positional_embedding
                .row_mut(t)
                .iter_mut()
                .zip(row)
                .for_each(|(g, v)| *g += v);
        }
    }
    Ok(loss)
}

/// Mean next-token cross-entropy without gradients.
pub(crate) fn loss_only(
    w: &TransformerWeights,
    cfg: &ModelConfig,
    inputs: &[&[u32]],
    targets: &[&[u32]],
    spec: &InterventionSpec,
) -> Result<f64> {
    let fwd = forward_batch(w, cfg, inputs, spec, Retain::default())?;
    let seq_len = inputs[0].len();
    let mut loss = 0.0;
    for (b, tgt) in targets.iter().enumerate() {
        for (t, &target) in tgt.iter().enumerate() {
            let row = fwd.logits.row(b * seq_len + t);
            loss -= row[target as usize] - log_sum_exp(row);
        }
    }
    Ok(loss / (inputs.len() * seq_len) as f64)
}

