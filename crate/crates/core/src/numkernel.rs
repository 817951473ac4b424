//! Dense f64 kernel: row-major matrices, softmax, norms and cosine similarity.
//!
//! Every forward op has a vector-Jacobian companion (`*_backward`) that maps an
//! output cotangent to input cotangents. Accumulation always runs left to
//! right in index order so results are reproducible bit for bit.
//!
//! Vectors are plain `&[f64]` slices; [`Matrix`] carries the shape.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Norms below this are treated as zero by [`cosine_sim`].
pub const ZERO_NORM: f64 = 1e-30;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::ShapeMismatch(format!(
                "{rows}x{cols} matrix needs {} entries, got {}",
                rows * cols,
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFiniteData(format!(
                "matrix entry ({}, {})",
                pos / cols.max(1),
                pos % cols.max(1)
            )));
        }
        Ok(Self { rows, cols, data })
    }

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

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if let Some(bad) = rows.iter().position(|r| r.len() != cols) {
            return Err(Error::ShapeMismatch(format!(
                "row {bad} has {} entries, expected {cols}",
                rows[bad].len()
            )));
        }
        Self::new(rows.len(), cols, rows.concat())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.cols.max(1)).take(self.rows)
    }

    pub fn transpose(&self) -> Matrix {
        let mut t = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        t
    }

    /// `self += scale * other`, elementwise.
    pub fn add_scaled(&mut self, other: &Matrix, scale: f64) {
        debug_assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += scale * b;
        }
    }

    /// Gathers the given rows into a new matrix.
    pub fn select_rows(&self, idx: &[usize]) -> Matrix {
        let mut data = Vec::with_capacity(idx.len() * self.cols);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        Matrix {
            rows: idx.len(),
            cols: self.cols,
            data,
        }
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = 0.0;
    for (x, y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

/// `A · B`.
pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.rows {
        return Err(Error::ShapeMismatch(format!(
            "matmul {}x{} by {}x{}",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    let (m, k, n) = (a.rows, a.cols, b.cols);
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            let mut acc = 0.0;
            for p in 0..k {
                acc += a.data[i * k + p] * b.data[p * n + j];
            }
            out[i * n + j] = acc;
        }
    }
    Ok(Matrix {
        rows: m,
        cols: n,
        data: out,
    })
}

/// Cotangents `(dA, dB) = (dC · Bᵀ, Aᵀ · dC)` for `C = A · B`.
pub fn matmul_backward(a: &Matrix, b: &Matrix, d_out: &Matrix) -> Result<(Matrix, Matrix)> {
    if d_out.shape() != (a.rows, b.cols) || a.cols != b.rows {
        return Err(Error::ShapeMismatch(format!(
            "matmul_backward: A {:?}, B {:?}, dC {:?}",
            a.shape(),
            b.shape(),
            d_out.shape()
        )));
    }
    let da = matmul(d_out, &b.transpose())?;
    let db = matmul(&a.transpose(), d_out)?;
    Ok((da, db))
}

/// Row vector times matrix: `x · W`, with `x.len() == W.rows()`.
pub fn vecmat(x: &[f64], w: &Matrix) -> Result<Vec<f64>> {
    if x.len() != w.rows {
        return Err(Error::ShapeMismatch(format!(
            "vecmat: vector of {} by {}x{}",
            x.len(),
            w.rows,
            w.cols
        )));
    }
    let mut out = vec![0.0; w.cols];
    for (j, o) in out.iter_mut().enumerate() {
        let mut acc = 0.0;
        for (i, xi) in x.iter().enumerate() {
            acc += xi * w.data[i * w.cols + j];
        }
        *o = acc;
    }
    Ok(out)
}

/// Cotangents of `y = x · W`: `dx = W · dy` and `dW = xᵀ dy` (outer product).
pub fn vecmat_backward(x: &[f64], w: &Matrix, dy: &[f64]) -> (Vec<f64>, Matrix) {
    debug_assert_eq!(x.len(), w.rows);
    debug_assert_eq!(dy.len(), w.cols);
    let dx = w.iter_rows().map(|row| dot(row, dy)).collect();
    let mut dw = Matrix::zeros(w.rows, w.cols);
    for (i, xi) in x.iter().enumerate() {
        for (j, g) in dy.iter().enumerate() {
            dw.data[i * w.cols + j] = xi * g;
        }
    }
    (dx, dw)
}

/// `M += scale · x yᵀ`.
pub fn add_outer(m: &mut Matrix, x: &[f64], y: &[f64], scale: f64) {
    debug_assert_eq!((x.len(), y.len()), m.shape());
    let cols = m.cols;
    for (i, xi) in x.iter().enumerate() {
        let s = scale * xi;
        for (dst, yj) in m.data[i * cols..(i + 1) * cols].iter_mut().zip(y) {
            *dst += s * yj;
        }
    }
}

/// Matrix times column vector: `A · x`.
pub fn matvec(a: &Matrix, x: &[f64]) -> Result<Vec<f64>> {
    if x.len() != a.cols {
        return Err(Error::ShapeMismatch(format!(
            "matvec: {}x{} by vector of {}",
            a.rows,
            a.cols,
            x.len()
        )));
    }
    Ok(a.iter_rows().map(|row| dot(row, x)).collect())
}

/// Cotangents of `y = A · x`: `dA = dy xᵀ` and `dx = Aᵀ dy`.
pub fn matvec_backward(a: &Matrix, x: &[f64], dy: &[f64]) -> (Matrix, Vec<f64>) {
    debug_assert_eq!(dy.len(), a.rows);
    let mut da = Matrix::zeros(a.rows, a.cols);
    let mut dx = vec![0.0; a.cols];
    for (i, g) in dy.iter().enumerate() {
        let row = a.row(i);
        for j in 0..a.cols {
            da.data[i * a.cols + j] = g * x[j];
            dx[j] += g * row[j];
        }
    }
    (da, dx)
}

/// Numerically stable softmax (max-subtracted).
pub fn softmax_row(v: &[f64]) -> Result<Vec<f64>> {
    if v.is_empty() {
        return Err(Error::EmptyInput("softmax_row"));
    }
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = v.iter().map(|x| (x - max).exp()).collect();
    let mut sum = 0.0;
    for e in &exps {
        sum += e;
    }
    Ok(exps.into_iter().map(|e| e / sum).collect())
}

/// Given the softmax output `y` and cotangent `dy`, returns `y ⊙ (dy − ⟨y, dy⟩)`.
pub fn softmax_backward(y: &[f64], dy: &[f64]) -> Vec<f64> {
    let inner = dot(y, dy);
    y.iter().zip(dy).map(|(yi, gi)| yi * (gi - inner)).collect()
}

/// Log-sum-exp with max subtraction.
pub fn log_sum_exp(v: &[f64]) -> f64 {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in v {
        sum += (x - max).exp();
    }
    max + sum.ln()
}

pub fn l2_norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// `dn · a / |a|`; the zero vector gets a zero cotangent.
pub fn l2_norm_backward(a: &[f64], d_norm: f64) -> Vec<f64> {
    let n = l2_norm(a);
    if n == 0.0 {
        return vec![0.0; a.len()];
    }
    a.iter().map(|x| d_norm * x / n).collect()
}

pub fn normalize(a: &[f64]) -> Result<Vec<f64>> {
    let n = l2_norm(a);
    if n < ZERO_NORM {
        return Err(Error::ZeroVector("normalize"));
    }
    Ok(a.iter().map(|x| x / n).collect())
}

pub fn cosine_sim(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::ShapeMismatch(format!(
            "cosine of vectors with {} and {} entries",
            a.len(),
            b.len()
        )));
    }
    let na = l2_norm(a);
    let nb = l2_norm(b);
    if na < ZERO_NORM || nb < ZERO_NORM {
        return Err(Error::ZeroVector("cosine_sim"));
    }
    // Elementwise products and the norm product both commute in IEEE
    // arithmetic, so swapping the arguments gives the same bits.
    Ok((dot(a, b) / (na * nb)).clamp(-1.0, 1.0))
}

/// Cotangents `(da, db)` of `s = cos(a, b)` for an output cotangent `ds`.
///
/// `∂s/∂a = b / (|a||b|) − s · a / |a|²`, symmetric for `b`.
pub fn cosine_backward(a: &[f64], b: &[f64], ds: f64) -> Result<(Vec<f64>, Vec<f64>)> {
    let na = l2_norm(a);
    let nb = l2_norm(b);
    if na < ZERO_NORM || nb < ZERO_NORM {
        return Err(Error::ZeroVector("cosine_backward"));
    }
    let s = dot(a, b) / (na * nb);
    let inv = 1.0 / (na * nb);
    let da = a
        .iter()
        .zip(b)
        .map(|(x, y)| ds * (y * inv - s * x / (na * na)))
        .collect();
    let db = a
        .iter()
        .zip(b)
        .map(|(x, y)| ds * (x * inv - s * y / (nb * nb)))
        .collect();
    Ok((da, db))
}

/// `|a − b| / max(|a|, |b|, floor)`.
///
/// The floor keeps gradients that are zero up to rounding from reading as
/// large relative errors.
pub fn relative_error(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}
