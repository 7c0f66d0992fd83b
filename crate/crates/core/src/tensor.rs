// SPDX-License-Identifier: MIT OR Apache-2.0

//! Dense f64 kernel: row-major matrices, products, row softmax, layer
//! normalization, GELU and norms.
//!
//! Shapes are validated at operation boundaries; `Matrix` is a single
//! concrete type for every tensor in the model.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{AscError, Result};

/// Row-major dense matrix of `f64`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    /// Wraps a row-major buffer. Fails unless `data.len() == rows * cols`.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(AscError::Shape(format!(
                "buffer of length {} cannot form a {rows}x{cols} matrix",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    /// Builds a matrix from equal-length rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            if r.len() != cols {
                return Err(AscError::Shape(format!(
                    "row {i} has length {}, expected {cols}",
                    r.len()
                )));
            }
            data.extend_from_slice(r);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn diag(values: &[f64]) -> Self {
        let n = values.len();
        let mut m = Self::zeros(n, n);
        for (i, v) in values.iter().enumerate() {
            m.data[i * n + i] = *v;
        }
        m
    }

    /// Entries drawn i.i.d. from `N(0, std^2)`.
    pub fn random_normal<R: Rng + ?Sized>(rows: usize, cols: usize, std: f64, rng: &mut R) -> Self {
        let normal = rand_distr::Normal::new(0.0, std).expect("finite std");
        let data = (0..rows * cols).map(|_| rng.sample(normal)).collect();
        Self { rows, cols, data }
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    /// Copies rows `start..end` into a new matrix.
    pub fn slice_rows(&self, start: usize, end: usize) -> Matrix {
        Matrix {
            rows: end - start,
            cols: self.cols,
            data: self.data[start * self.cols..end * self.cols].to_vec(),
        }
    }

    /// Copies columns `start..end` into a new matrix.
    pub fn slice_cols(&self, start: usize, end: usize) -> Matrix {
        let mut out = Matrix::zeros(self.rows, end - start);
        for i in 0..self.rows {
            out.row_mut(i).copy_from_slice(&self.row(i)[start..end]);
        }
        out
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        out
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn scale(&mut self, factor: f64) {
        self.data.iter_mut().for_each(|v| *v *= factor);
    }

    pub fn scaled(&self, factor: f64) -> Matrix {
        let mut out = self.clone();
        out.scale(factor);
        out
    }

    /// `self += other`, elementwise.
    pub fn add_assign(&mut self, other: &Matrix) -> Result<()> {
        check_same_shape(self, other, "add")?;
        self.data
            .iter_mut()
            .zip(&other.data)
            .for_each(|(a, b)| *a += *b);
        Ok(())
    }

    pub fn sub(&self, other: &Matrix) -> Result<Matrix> {
        check_same_shape(self, other, "sub")?;
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect();
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols,
            data,
        })
    }

    /// Matrix-vector product `self · x` treating `x` as a column.
    pub fn matvec(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.cols {
            return Err(AscError::Shape(format!(
                "matvec: {}x{} matrix against vector of length {}",
                self.rows,
                self.cols,
                x.len()
            )));
        }
        Ok((0..self.rows).map(|i| dot(self.row(i), x)).collect())
    }

    /// Row-vector product `x · self`.
    pub fn vecmat(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.rows {
            return Err(AscError::Shape(format!(
                "vecmat: vector of length {} against {}x{} matrix",
                x.len(),
                self.rows,
                self.cols
            )));
        }
        let mut out = vec![0.0; self.cols];
        for (i, xi) in x.iter().enumerate() {
            axpy(*xi, self.row(i), &mut out);
        }
        Ok(out)
    }

    pub fn frobenius_norm(&self) -> f64 {
        l2_norm(&self.data)
    }
}

fn check_same_shape(a: &Matrix, b: &Matrix, op: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(AscError::Shape(format!(
            "{op}: {}x{} vs {}x{}",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// General strided product
// ---------------------------------------------------------------------------

/// Borrowed strided view used to address sub-blocks (per-head column groups,
/// per-sequence row groups) without copying.
#[derive(Clone, Copy)]
pub(crate) struct View<'a> {
    pub data: &'a [f64],
    pub rows: usize,
    pub cols: usize,
    pub row_stride: usize,
    pub col_stride: usize,
}

impl<'a> View<'a> {
    pub fn of(m: &'a Matrix) -> Self {
        Self {
            data: &m.data,
            rows: m.rows,
            cols: m.cols,
            row_stride: m.cols,
            col_stride: 1,
        }
    }

    /// Rows `r0..r0+rows`, columns `c0..c0+cols` of a row-major matrix.
    pub fn block(m: &'a Matrix, r0: usize, rows: usize, c0: usize, cols: usize) -> Self {
        debug_assert!(r0 + rows <= m.rows && c0 + cols <= m.cols);
        let start = r0 * m.cols + c0;
        Self {
            data: &m.data[start..],
            rows,
            cols,
            row_stride: m.cols,
            col_stride: 1,
        }
    }

    pub fn t(self) -> Self {
        Self {
            data: self.data,
            rows: self.cols,
            cols: self.rows,
            row_stride: self.col_stride,
            col_stride: self.row_stride,
        }
    }

    fn max_offset(&self) -> usize {
        if self.rows == 0 || self.cols == 0 {
            0
        } else {
            (self.rows - 1) * self.row_stride + (self.cols - 1) * self.col_stride
        }
    }
}

/// Mutable strided destination for [`gemm`].
pub(crate) struct ViewMut<'a> {
    pub data: &'a mut [f64],
    pub rows: usize,
    pub cols: usize,
    pub row_stride: usize,
    pub col_stride: usize,
}

impl<'a> ViewMut<'a> {
    pub fn of(m: &'a mut Matrix) -> Self {
        let (rows, cols) = m.shape();
        Self {
            data: &mut m.data,
            rows,
            cols,
            row_stride: cols,
            col_stride: 1,
        }
    }

    pub fn block(m: &'a mut Matrix, r0: usize, rows: usize, c0: usize, cols: usize) -> Self {
        debug_assert!(r0 + rows <= m.rows && c0 + cols <= m.cols);
        let stride = m.cols;
        let start = r0 * stride + c0;
        Self {
            data: &mut m.data[start..],
            rows,
            cols,
            row_stride: stride,
            col_stride: 1,
        }
    }
}

/// `c = alpha * a * b + beta * c` over strided views.
///
/// Each output entry accumulates over the inner dimension in an order that
/// depends only on that dimension, so a row of the result is bitwise
/// independent of how many other rows are computed alongside it.
pub(crate) fn gemm(alpha: f64, a: View<'_>, b: View<'_>, beta: f64, c: ViewMut<'_>) {
    assert_eq!(a.cols, b.rows, "gemm inner dimension");
    assert_eq!(a.rows, c.rows, "gemm output rows");
    assert_eq!(b.cols, c.cols, "gemm output cols");
    if c.rows == 0 || c.cols == 0 {
        return;
    }
    let c_max = (c.rows - 1) * c.row_stride + (c.cols - 1) * c.col_stride;
    assert!(c_max < c.data.len(), "gemm output view out of bounds");
    if a.cols == 0 {
        for i in 0..c.rows {
            for j in 0..c.cols {
                let idx = i * c.row_stride + j * c.col_stride;
                c.data[idx] = if beta == 0.0 { 0.0 } else { beta * c.data[idx] };
            }
        }
        return;
    }
    assert!(a.max_offset() < a.data.len(), "gemm lhs view out of bounds");
    assert!(b.max_offset() < b.data.len(), "gemm rhs view out of bounds");
    // SAFETY: every address touched by dgemm lies within the offsets checked
    // above, and `c` is an exclusive borrow disjoint from `a` and `b`.
    unsafe {
        matrixmultiply::dgemm(
            a.rows,
            a.cols,
            b.cols,
            alpha,
            a.data.as_ptr(),
            a.row_stride as isize,
            a.col_stride as isize,
            b.data.as_ptr(),
            b.row_stride as isize,
            b.col_stride as isize,
            beta,
            c.data.as_mut_ptr(),
            c.row_stride as isize,
            c.col_stride as isize,
        );
    }
}

/// Matrix product `a · b`.
pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.rows {
        return Err(AscError::Shape(format!(
            "matmul: {}x{} times {}x{}",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    let mut out = Matrix::zeros(a.rows, b.cols);
    gemm(1.0, View::of(a), View::of(b), 0.0, ViewMut::of(&mut out));
    Ok(out)
}

/// `aᵀ · b` without materializing the transpose.
pub fn matmul_tn(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.rows != b.rows {
        return Err(AscError::Shape(format!(
            "matmul_tn: ({}x{})ᵀ times {}x{}",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    let mut out = Matrix::zeros(a.cols, b.cols);
    gemm(1.0, View::of(a).t(), View::of(b), 0.0, ViewMut::of(&mut out));
    Ok(out)
}

/// `a · bᵀ` without materializing the transpose.
pub fn matmul_nt(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.cols {
        return Err(AscError::Shape(format!(
            "matmul_nt: {}x{} times ({}x{})ᵀ",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    let mut out = Matrix::zeros(a.rows, b.rows);
    gemm(1.0, View::of(a), View::of(b).t(), 0.0, ViewMut::of(&mut out));
    Ok(out)
}

// ---------------------------------------------------------------------------
// Elementwise and row-wise kernels
// ---------------------------------------------------------------------------

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `y += alpha * x`.
#[inline]
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    y.iter_mut().zip(x).for_each(|(yi, xi)| *yi += alpha * xi);
}

pub fn l2_norm(x: &[f64]) -> f64 {
    dot(x, x).sqrt()
}

/// In-place numerically stable softmax of one row.
pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    let inv = 1.0 / sum;
    row.iter_mut().for_each(|v| *v *= inv);
}

/// Softmax applied independently to every row.
pub fn softmax_rows(m: &Matrix) -> Matrix {
    let mut out = m.clone();
    for i in 0..out.rows {
        softmax_in_place(out.row_mut(i));
    }
    out
}

/// Log-sum-exp of a row, stable for large magnitudes.
pub fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Shannon entropy (nats) of `softmax(logits)`.
pub fn softmax_entropy(logits: &[f64]) -> f64 {
    let lse = log_sum_exp(logits);
    let mut h = 0.0;
    for &z in logits {
        let logp = z - lse;
        let p = logp.exp();
        if p > 0.0 {
            h -= p * logp;
        }
    }
    h.max(0.0)
}

/// Layer normalization of one vector followed by an affine map.
pub fn layer_norm(x: &[f64], gain: &[f64], bias: &[f64], eps: f64) -> Result<Vec<f64>> {
    if gain.len() != x.len() || bias.len() != x.len() {
        return Err(AscError::Shape(format!(
            "layer_norm: input {}, gain {}, bias {}",
            x.len(),
            gain.len(),
            bias.len()
        )));
    }
    if !(eps > 0.0) {
        return Err(AscError::Input(format!("layer_norm eps must be > 0, got {eps}")));
    }
    let mut out = vec![0.0; x.len()];
    layer_norm_into(x, gain, bias, eps, &mut out);
    Ok(out)
}

/// Normalizes `x` into `out` and returns `1/sqrt(var + eps)`.
#[inline]
pub(crate) fn layer_norm_into(x: &[f64], gain: &[f64], bias: &[f64], eps: f64, out: &mut [f64]) -> f64 {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let rstd = 1.0 / (var + eps).sqrt();
    for i in 0..x.len() {
        out[i] = (x[i] - mean) * rstd * gain[i] + bias[i];
    }
    rstd
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// `0.5 (1 + tanh y) = σ(2y)`; one `exp` is much cheaper than `tanh`.
#[inline]
fn half_one_plus_tanh(y: f64) -> f64 {
    1.0 / (1.0 + (-2.0 * y).exp())
}

/// GELU, tanh approximation.
#[inline]
pub fn gelu_scalar(x: f64) -> f64 {
    x * half_one_plus_tanh(GELU_C * (x + GELU_A * x * x * x))
}

/// Derivative of [`gelu_scalar`].
#[inline]
pub fn gelu_grad_scalar(x: f64) -> f64 {
    let s = half_one_plus_tanh(GELU_C * (x + GELU_A * x * x * x));
    let dinner = GELU_C * (1.0 + 3.0 * GELU_A * x * x);
    s + 2.0 * x * s * (1.0 - s) * dinner
}

pub fn gelu(x: &[f64]) -> Vec<f64> {
    x.iter().map(|v| gelu_scalar(*v)).collect()
}

// ---------------------------------------------------------------------------
// Spectral norm
// ---------------------------------------------------------------------------

/// Default relative tolerance of [`operator_norm`].
pub const OPERATOR_NORM_TOL: f64 = 1e-8;
/// Default iteration cap of [`operator_norm`].
pub const OPERATOR_NORM_MAX_ITER: usize = 10_000;

/// Spectral norm by power iteration on `MᵀM`.
pub fn operator_norm(m: &Matrix) -> Result<f64> {
    operator_norm_with(m, OPERATOR_NORM_TOL, OPERATOR_NORM_MAX_ITER)
}

/// Spectral norm by power iteration, stopping once successive estimates
/// agree to relative tolerance `tol`.
pub fn operator_norm_with(m: &Matrix, tol: f64, max_iter: usize) -> Result<f64> {
    if m.rows == 0 || m.cols == 0 {
        return Ok(0.0);
    }
    if !m.is_finite() {
        return Err(AscError::Input("operator_norm: non-finite entries".into()));
    }
    // Fixed-seed start vector: deterministic and almost surely not
    // orthogonal to the top right-singular vector.
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed_0f_5eed);
    let mut v: Vec<f64> = (0..m.cols).map(|_| rng.gen_range(0.5..1.5)).collect();
    let n0 = l2_norm(&v);
    v.iter_mut().for_each(|x| *x /= n0);

    let mut sigma = 0.0;
    for _ in 0..max_iter {
        let mv = m.matvec(&v)?;
        let next_sigma = l2_norm(&mv);
        if next_sigma == 0.0 {
            // v lies in the null space; for a non-zero matrix retry from a basis vector.
            if m.data.iter().all(|x| *x == 0.0) {
                return Ok(0.0);
            }
            v = vec![0.0; m.cols];
            let j = (0..m.cols)
                .max_by(|&a, &b| {
                    let ca: f64 = (0..m.rows).map(|i| m.get(i, a).abs()).sum();
                    let cb: f64 = (0..m.rows).map(|i| m.get(i, b).abs()).sum();
                    ca.total_cmp(&cb)
                })
                .unwrap_or(0);
            v[j] = 1.0;
            continue;
        }
        let mut w = m.transpose().matvec(&mv)?;
        let wn = l2_norm(&w);
        w.iter_mut().for_each(|x| *x /= wn);
        v = w;
        if (next_sigma - sigma).abs() <= tol * next_sigma {
            // One more Rayleigh evaluation at the refined vector.
            let final_sigma = l2_norm(&m.matvec(&v)?);
            return Ok(final_sigma.max(next_sigma));
        }
        sigma = next_sigma;
    }
    Err(AscError::Numeric {
        message: format!("power iteration did not reach relative tolerance {tol} in {max_iter} iterations"),
        last_iterate: sigma,
    })
}
