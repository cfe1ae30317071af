//! Dense linear algebra and transformer primitives.
//!
//! Every [`Matrix`] stores `f64` values. In [`Precision::Single`] mode each
//! public operation rounds its outputs to the nearest `f32`, so the same code
//! path serves both precisions. Dot products always accumulate in `f64` with a
//! fixed summation order, which makes every operation bit-reproducible.

pub mod flops;
pub mod fp8;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use fp8::{dequantize_fp8_token, quantize_fp8_token};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    Single,
    #[default]
    Double,
}

impl Precision {
    #[inline]
    pub fn round(self, x: f64) -> f64 {
        match self {
            Precision::Single => x as f32 as f64,
            Precision::Double => x,
        }
    }

    pub fn bytes(self) -> usize {
        match self {
            Precision::Single => 4,
            Precision::Double => 8,
        }
    }
}

/// Row-major dense matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
    precision: Precision,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize, precision: Precision) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols], precision }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>, precision: Precision) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape("from_vec", format!("{} values for a {rows}x{cols} matrix", data.len())));
        }
        let data = data.into_iter().map(|x| precision.round(x)).collect();
        Ok(Self { rows, cols, data, precision })
    }

    /// Builds a matrix from nested rows. Panics on ragged input; intended for tests and literals.
    pub fn from_rows(rows: &[Vec<f64>], precision: Precision) -> Self {
        let cols = rows.first().map_or(0, Vec::len);
        assert!(rows.iter().all(|r| r.len() == cols), "ragged rows");
        let data = rows.iter().flatten().copied().collect();
        Self::from_vec(rows.len(), cols, data, precision).expect("consistent shape")
    }

    pub fn from_fn(rows: usize, cols: usize, precision: Precision, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(precision.round(f(i, j)));
            }
        }
        Self { rows, cols, data, precision }
    }

    pub fn identity(n: usize, precision: Precision) -> Self {
        Self::from_fn(n, n, precision, |i, j| if i == j { 1.0 } else { 0.0 })
    }

    pub fn row_vector(values: &[f64], precision: Precision) -> Self {
        Self::from_vec(1, values.len(), values.to_vec(), precision).expect("row vector")
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
    pub fn precision(&self) -> Precision {
        self.precision
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Mutable access to the raw buffer. Callers are responsible for keeping
    /// values representable in the matrix precision.
    #[inline]
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, value: f64) {
        self.data[i * self.cols + j] = self.precision.round(value);
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
        assert!(start <= end && end <= self.rows, "row range out of bounds");
        Matrix {
            rows: end - start,
            cols: self.cols,
            data: self.data[start * self.cols..end * self.cols].to_vec(),
            precision: self.precision,
        }
    }

    pub fn select_rows(&self, rows: &[usize]) -> Matrix {
        let mut data = Vec::with_capacity(rows.len() * self.cols);
        for &r in rows {
            data.extend_from_slice(self.row(r));
        }
        Matrix { rows: rows.len(), cols: self.cols, data, precision: self.precision }
    }

    pub fn push_row(&mut self, row: &[f64]) -> Result<()> {
        if self.rows > 0 && row.len() != self.cols {
            return Err(Error::shape("push_row", format!("row of {} into {} columns", row.len(), self.cols)));
        }
        if self.rows == 0 {
            self.cols = row.len();
        }
        self.data.extend(row.iter().map(|&x| self.precision.round(x)));
        self.rows += 1;
        Ok(())
    }

    pub fn transpose(&self) -> Matrix {
        Matrix::from_fn(self.cols, self.rows, self.precision, |i, j| self.get(j, i))
    }

    pub fn add(&self, other: &Matrix) -> Result<Matrix> {
        if self.shape() != other.shape() {
            return Err(Error::shape("add", format!("{:?} + {:?}", self.shape(), other.shape())));
        }
        let p = self.precision;
        let data = self.data.iter().zip(&other.data).map(|(a, b)| p.round(a + b)).collect();
        Ok(Matrix { rows: self.rows, cols: self.cols, data, precision: p })
    }

    pub fn scale(&self, factor: f64) -> Matrix {
        let p = self.precision;
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|x| p.round(x * factor)).collect(),
            precision: p,
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Matrix {
        let p = self.precision;
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&x| p.round(f(x))).collect(),
            precision: p,
        }
    }

    pub fn with_precision(&self, precision: Precision) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&x| precision.round(x)).collect(),
            precision,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Matrix) -> f64 {
        assert_eq!(self.shape(), other.shape());
        self.data.iter().zip(&other.data).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
    }
}

/// `c = a · b`, accumulating each dot product in `f64` over ascending `k`.
///
/// Records `2·m·k·n` flops against the current [`flops`] class.
pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.rows {
        return Err(Error::shape("matmul", format!("lhs is {}x{}, rhs is {}x{}", a.rows, a.cols, b.rows, b.cols)));
    }
    let (m, k, n) = (a.rows, a.cols, b.cols);
    let mut out = vec![0.0f64; m * n];
    for i in 0..m {
        let acc = &mut out[i * n..(i + 1) * n];
        let arow = a.row(i);
        for (kk, &aik) in arow.iter().enumerate() {
            if aik == 0.0 {
                continue;
            }
            let brow = &b.data[kk * n..(kk + 1) * n];
            for (c, &bkj) in acc.iter_mut().zip(brow) {
                *c += aik * bkj;
            }
        }
    }
    flops::record((2 * m * k * n) as u64);
    let p = a.precision;
    if p == Precision::Single {
        out.iter_mut().for_each(|x| *x = p.round(*x));
    }
    Ok(Matrix { rows: m, cols: n, data: out, precision: p })
}

/// Numerically stable row-wise softmax. Entries may be `-inf` (masked), but
/// every row needs at least one finite entry.
pub fn softmax_rows(a: &Matrix) -> Result<Matrix> {
    let mut out = a.clone();
    for r in 0..a.rows {
        let row = softmax_in_place(out.row_mut(r)).map_err(|_| Error::NoFiniteEntry { row: r })?;
        let p = a.precision;
        row.iter_mut().for_each(|x| *x = p.round(*x));
    }
    Ok(out)
}

/// Softmax over a slice in place. Fails when no entry is finite.
pub(crate) fn softmax_in_place(row: &mut [f64]) -> Result<&mut [f64]> {
    let max = row.iter().copied().filter(|x| x.is_finite()).fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() || row.iter().any(|x| x.is_nan() || *x == f64::INFINITY) {
        return Err(Error::NoFiniteEntry { row: 0 });
    }
    let mut sum = 0.0;
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in row.iter_mut() {
        *x /= sum;
    }
    Ok(row)
}

pub fn rmsnorm(x: &[f64], weight: &[f64], eps: f64) -> Result<Vec<f64>> {
    if x.len() != weight.len() {
        return Err(Error::shape("rmsnorm", format!("x has {} values, weight has {}", x.len(), weight.len())));
    }
    if eps <= 0.0 {
        return Err(Error::Config(format!("rmsnorm eps must be positive, got {eps}")));
    }
    let inv = inv_rms(x, eps);
    Ok(x.iter().zip(weight).map(|(v, w)| v * inv * w).collect())
}

#[inline]
pub(crate) fn inv_rms(x: &[f64], eps: f64) -> f64 {
    let ms = x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64;
    1.0 / (ms + eps).sqrt()
}

/// RMS-normalizes every row of `x` with a shared `1 × cols` weight row.
pub fn rmsnorm_rows(x: &Matrix, weight: &Matrix, eps: f64) -> Result<Matrix> {
    if weight.rows != 1 || weight.cols != x.cols {
        return Err(Error::shape("rmsnorm_rows", format!("weight {:?} for input {:?}", weight.shape(), x.shape())));
    }
    let p = x.precision;
    let mut out = x.clone();
    for r in 0..x.rows {
        let inv = inv_rms(x.row(r), eps);
        for (o, w) in out.row_mut(r).iter_mut().zip(weight.row(0)) {
            *o = p.round(*o * inv * w);
        }
    }
    Ok(out)
}

/// Rotation angles per (position, pair): `pos · theta^(-2i/head_dim)`.
fn rope_angle(position: usize, pair: usize, theta: f64, head_dim: usize) -> f64 {
    let inv_freq = theta.powf(-2.0 * pair as f64 / head_dim as f64);
    position as f64 * inv_freq
}

/// Rotary position embedding applied per head. Pairs are `(i, i + head_dim/2)`.
///
/// With `inverse = true` each pair is rotated by the negated angle, which is
/// the adjoint of the forward rotation.
pub(crate) fn rope_rotate(
    x: &Matrix,
    positions: &[usize],
    theta: f64,
    head_dim: usize,
    inverse: bool,
) -> Result<Matrix> {
    if head_dim == 0 || !head_dim.is_multiple_of(2) {
        return Err(Error::shape("rope_apply", format!("head_dim must be even and positive, got {head_dim}")));
    }
    if !x.cols.is_multiple_of(head_dim) {
        return Err(Error::shape("rope_apply", format!("{} columns not divisible by head_dim {head_dim}", x.cols)));
    }
    if positions.len() != x.rows {
        return Err(Error::shape("rope_apply", format!("{} positions for {} rows", positions.len(), x.rows)));
    }
    let half = head_dim / 2;
    let sign = if inverse { -1.0 } else { 1.0 };
    let p = x.precision;
    let mut out = x.clone();
    for (r, &pos) in positions.iter().enumerate() {
        let (cos, sin): (Vec<f64>, Vec<f64>) = (0..half)
            .map(|i| {
                let a = sign * rope_angle(pos, i, theta, head_dim);
                (a.cos(), a.sin())
            })
            .unzip();
        let src = x.row(r);
        let dst = out.row_mut(r);
        for h in 0..x.cols / head_dim {
            let base = h * head_dim;
            for i in 0..half {
                let a = src[base + i];
                let b = src[base + half + i];
                dst[base + i] = p.round(a * cos[i] - b * sin[i]);
                dst[base + half + i] = p.round(a * sin[i] + b * cos[i]);
            }
        }
    }
    Ok(out)
}

pub fn rope_apply(x: &Matrix, positions: &[usize], theta: f64, head_dim: usize) -> Result<Matrix> {
    rope_rotate(x, positions, theta, head_dim, false)
}

pub fn cosine_similarity(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::shape("cosine_similarity", format!("{} vs {} values", u.len(), v.len())));
    }
    let nu = u.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nv = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if nu == 0.0 || nv == 0.0 {
        return Err(Error::ZeroVector { context: None });
    }
    let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    Ok((dot / (nu * nv)).clamp(-1.0, 1.0))
}

/// Index of the largest logit, ties going to the lowest index.
pub fn sample_argmax(logits: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in logits.iter().enumerate().skip(1) {
        if x > logits[best] {
            best = i;
        }
    }
    best
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[inline]
pub fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}
