use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Norms at or below this are rejected by [`l2_normalize`].
pub const NORM_EPS: f64 = 1e-12;

/// Dense row-major matrix of 64-bit reals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor2 {
    rows: usize,
    cols: usize,
    values: Vec<f64>,
}

impl Tensor2 {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Tensor2 {
            rows,
            cols,
            values: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != rows * cols {
            return Err(Error::Dimension(format!(
                "{} values for a {rows}x{cols} tensor",
                values.len()
            )));
        }
        Ok(Tensor2 { rows, cols, values })
    }

    /// Stack equal-length rows. An empty slice gives a 0x0 tensor.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut values = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(Error::Dimension(format!(
                    "row {i} has {} columns, expected {cols}",
                    r.len()
                )));
            }
            values.extend_from_slice(r);
        }
        Ok(Tensor2 {
            rows: rows.len(),
            cols,
            values,
        })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut values = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                values.push(f(r, c));
            }
        }
        Tensor2 { rows, cols, values }
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

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.values
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.values[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.values[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.values[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.values[r * self.cols..(r + 1) * self.cols]
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f64]> {
        // chunks_exact(0) panics
        self.values.chunks_exact(self.cols.max(1)).take(self.rows)
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    /// Select rows by index, in the given order.
    pub fn select_rows(&self, idx: &[usize]) -> Tensor2 {
        let mut values = Vec::with_capacity(idx.len() * self.cols);
        for &i in idx {
            values.extend_from_slice(self.row(i));
        }
        Tensor2 {
            rows: idx.len(),
            cols: self.cols,
            values,
        }
    }

    pub fn transpose(&self) -> Tensor2 {
        Tensor2::from_fn(self.cols, self.rows, |r, c| self.get(c, r))
    }

    /// `out = op(A) · op(B)` with `op(A)` of shape m×k given by strides.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[f64],
        (rsa, csa): (usize, usize),
        b: &[f64],
        (rsb, csb): (usize, usize),
    ) -> Tensor2 {
        let mut out = Tensor2::zeros(m, n);
        if m == 0 || n == 0 || k == 0 {
            return out;
        }
        // SAFETY: the strides address only elements inside `a` (m×k),
        // `b` (k×n) and `out` (m×n, row-major), which the callers' shape
        // assertions guarantee.
        unsafe {
            matrixmultiply::dgemm(
                m,
                k,
                n,
                1.0,
                a.as_ptr(),
                rsa as isize,
                csa as isize,
                b.as_ptr(),
                rsb as isize,
                csb as isize,
                0.0,
                out.values.as_mut_ptr(),
                n as isize,
                1,
            );
        }
        out
    }

    /// `self · other`
    pub fn matmul(&self, other: &Tensor2) -> Tensor2 {
        assert_eq!(
            self.cols,
            other.rows,
            "matmul: {:?} x {:?}",
            self.shape(),
            other.shape()
        );
        Self::gemm(
            self.rows,
            self.cols,
            other.cols,
            &self.values,
            (self.cols, 1),
            &other.values,
            (other.cols, 1),
        )
    }

    /// `selfᵀ · other`
    pub fn matmul_tn(&self, other: &Tensor2) -> Tensor2 {
        assert_eq!(
            self.rows,
            other.rows,
            "matmul_tn: {:?}ᵀ x {:?}",
            self.shape(),
            other.shape()
        );
        Self::gemm(
            self.cols,
            self.rows,
            other.cols,
            &self.values,
            (1, self.cols),
            &other.values,
            (other.cols, 1),
        )
    }

    /// `self · otherᵀ`
    pub fn matmul_nt(&self, other: &Tensor2) -> Tensor2 {
        assert_eq!(
            self.cols,
            other.cols,
            "matmul_nt: {:?} x {:?}ᵀ",
            self.shape(),
            other.shape()
        );
        Self::gemm(
            self.rows,
            self.cols,
            other.rows,
            &self.values,
            (self.cols, 1),
            &other.values,
            (1, other.cols),
        )
    }

    pub fn add_assign(&mut self, other: &Tensor2) {
        assert_eq!(self.shape(), other.shape(), "add_assign shape");
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += b;
        }
    }

    pub fn scale_assign(&mut self, s: f64) {
        for v in &mut self.values {
            *v *= s;
        }
    }

    pub fn scaled(&self, s: f64) -> Tensor2 {
        let mut out = self.clone();
        out.scale_assign(s);
        out
    }

    /// Column sums as a 1 x cols tensor.
    pub fn column_sums(&self) -> Tensor2 {
        let mut out = Tensor2::zeros(1, self.cols);
        for r in self.iter_rows() {
            for (o, v) in out.values.iter_mut().zip(r) {
                *o += v;
            }
        }
        out
    }

    pub fn max_abs_diff(&self, other: &Tensor2) -> f64 {
        assert_eq!(self.shape(), other.shape());
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

pub fn l2_normalize(v: &[f64]) -> Result<Vec<f64>> {
    let n = norm(v);
    if n.is_nan() || n <= NORM_EPS {
        return Err(Error::DegenerateEmbedding { norm: n });
    }
    Ok(v.iter().map(|x| x / n).collect())
}

/// Normalize every row; fails on the first degenerate row.
pub fn l2_normalize_rows(t: &Tensor2) -> Result<Tensor2> {
    let mut out = t.clone();
    for r in 0..t.rows() {
        let row = out.row_mut(r);
        let n = norm(row);
        if n.is_nan() || n <= NORM_EPS {
            return Err(Error::DegenerateEmbedding { norm: n });
        }
        for x in row {
            *x /= n;
        }
    }
    Ok(out)
}

/// Inner products between the rows of `a` and the rows of `b`.
pub fn similarity_matrix(a: &Tensor2, b: &Tensor2) -> Result<Tensor2> {
    if a.cols() != b.cols() {
        return Err(Error::Dimension(format!(
            "similarity between {}-dim and {}-dim embeddings",
            a.cols(),
            b.cols()
        )));
    }
    Ok(a.matmul_nt(b))
}

/// Which extremum [`logsumexp`] smooths.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SoftSign {
    /// `τ·log Σ e^{x/τ}`, an upper bound on the max.
    Max,
    /// `−τ·log Σ e^{−x/τ}`, a lower bound on the min.
    Min,
}

impl SoftSign {
    pub fn factor(self) -> f64 {
        match self {
            SoftSign::Max => 1.0,
            SoftSign::Min => -1.0,
        }
    }
}

/// Temperature-smoothed max or min with max-shift stabilization.
///
/// For `SoftSign::Max` the result lies in `[max, max + τ ln m]`; for
/// `SoftSign::Min` in `[min − τ ln m, min]`.
pub fn logsumexp(xs: &[f64], sign: SoftSign, tau: f64) -> Result<f64> {
    if xs.is_empty() {
        return Err(Error::EmptyInput("logsumexp of an empty sequence"));
    }
    if tau.is_nan() || tau <= 0.0 {
        return Err(Error::Config(format!("temperature must be positive, got {tau}")));
    }
    Ok(logsumexp_unchecked(xs.iter().copied(), sign, tau))
}

/// Same as [`logsumexp`] for callers that already validated the input.
pub(crate) fn logsumexp_unchecked(xs: impl Iterator<Item = f64> + Clone, sign: SoftSign, tau: f64) -> f64 {
    let s = sign.factor();
    let shift = xs.clone().map(|x| s * x / tau).fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = xs.map(|x| (s * x / tau - shift).exp()).sum();
    s * tau * (shift + sum.ln())
}

/// Softmax weights `e^{s·x/τ} / Σ e^{s·x/τ}`, the derivative of
/// [`logsumexp`] with respect to each input.
pub(crate) fn soft_weights(xs: &[f64], sign: SoftSign, tau: f64) -> Vec<f64> {
    let s = sign.factor();
    let shift = xs.iter().map(|x| s * x / tau).fold(f64::NEG_INFINITY, f64::max);
    let mut w: Vec<f64> = xs.iter().map(|x| (s * x / tau - shift).exp()).collect();
    let total: f64 = w.iter().sum();
    for v in &mut w {
        *v /= total;
    }
    w
}

/// `ln(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Logistic function, the derivative of [`softplus`].
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
