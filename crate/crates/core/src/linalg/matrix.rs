//! Row-major dense matrices and the GEMM kernel every other module builds on.
//!
//! The kernel itself is `matrixmultiply::dgemm`, which is single threaded and
//! bitwise deterministic for a given build. Strided views let callers multiply
//! column blocks and transposes without copying.

use serde::{Deserialize, Serialize};

use crate::error::{dim_err, PhmError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

/// Borrowed strided view into matrix storage.
#[derive(Debug, Clone, Copy)]
pub struct MatRef<'a> {
    data: &'a [f64],
    offset: usize,
    rows: usize,
    cols: usize,
    rs: usize,
    cs: usize,
}

/// Mutable strided view into matrix storage.
#[derive(Debug)]
pub struct MatMut<'a> {
    data: &'a mut [f64],
    offset: usize,
    rows: usize,
    cols: usize,
    rs: usize,
    cs: usize,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return dim_err(format!(
                "buffer of length {} cannot hold a {rows}x{cols} matrix",
                data.len()
            ));
        }
        Ok(Self { rows, cols, data })
    }

    /// Builds a matrix from row slices; all rows must share one length.
    pub fn from_rows(rows: &[&[f64]]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return dim_err("ragged rows");
            }
            data.extend_from_slice(r);
        }
        Ok(Self { rows: rows.len(), cols, data })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
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
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
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
        let c = self.cols;
        &mut self.data[i * c..(i + 1) * c]
    }

    pub fn transpose(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |i, j| self.get(j, i))
    }

    pub fn scaled(&self, s: f64) -> Self {
        self.map(|x| x * s)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self { rows: self.rows, cols: self.cols, data: self.data.iter().map(|&x| f(x)).collect() }
    }

    pub fn add(&self, other: &Matrix) -> Result<Self> {
        self.zip_with(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Matrix) -> Result<Self> {
        self.zip_with(other, |a, b| a - b)
    }

    pub fn zip_with(&self, other: &Matrix, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        if self.shape() != other.shape() {
            return dim_err(format!("{:?} vs {:?}", self.shape(), other.shape()));
        }
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect();
        Ok(Self { rows: self.rows, cols: self.cols, data })
    }

    /// `self += s * other`
    pub fn axpy(&mut self, s: f64, other: &Matrix) -> Result<()> {
        if self.shape() != other.shape() {
            return dim_err(format!("{:?} vs {:?}", self.shape(), other.shape()));
        }
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += s * b;
        }
        Ok(())
    }

    pub fn fill(&mut self, v: f64) {
        self.data.iter_mut().for_each(|x| *x = v);
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn ensure_finite(&self, what: &str) -> Result<()> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(PhmError::Numeric(format!("{what} contains non-finite entries")))
        }
    }

    /// Sum over rows, one entry per column.
    pub fn column_sums(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.cols];
        for i in 0..self.rows {
            for (o, &x) in out.iter_mut().zip(self.row(i)) {
                *o += x;
            }
        }
        out
    }

    /// Adds `v` to every row.
    pub fn add_row_vector(&mut self, v: &[f64]) {
        debug_assert_eq!(v.len(), self.cols);
        for i in 0..self.rows {
            for (x, &b) in self.row_mut(i).iter_mut().zip(v) {
                *x += b;
            }
        }
    }

    /// Copies columns `start..start + width` into a new matrix.
    pub fn columns(&self, start: usize, width: usize) -> Self {
        Self::from_fn(self.rows, width, |i, j| self.get(i, start + j))
    }

    /// Copies rows `start..start + height` into a new matrix.
    pub fn rows_range(&self, start: usize, height: usize) -> Self {
        let c = self.cols;
        Self {
            rows: height,
            cols: c,
            data: self.data[start * c..(start + height) * c].to_vec(),
        }
    }

    pub fn max_abs_diff(&self, other: &Matrix) -> f64 {
        assert_eq!(self.shape(), other.shape());
        self.data.iter().zip(&other.data).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
    }

    pub fn view(&self) -> MatRef<'_> {
        MatRef { data: &self.data, offset: 0, rows: self.rows, cols: self.cols, rs: self.cols, cs: 1 }
    }

    pub fn view_mut(&mut self) -> MatMut<'_> {
        let (rows, cols) = self.shape();
        MatMut { data: &mut self.data, offset: 0, rows, cols, rs: cols, cs: 1 }
    }
}

impl<'a> MatRef<'a> {
    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn t(self) -> Self {
        Self { rows: self.cols, cols: self.rows, rs: self.cs, cs: self.rs, ..self }
    }

    /// Sub-view of columns `start..start + width`.
    pub fn col_block(self, start: usize, width: usize) -> Self {
        assert!(start + width <= self.cols, "column block out of range");
        Self { offset: self.offset + start * self.cs, cols: width, ..self }
    }

    /// Sub-view of rows `start..start + height`.
    pub fn row_block(self, start: usize, height: usize) -> Self {
        assert!(start + height <= self.rows, "row block out of range");
        Self { offset: self.offset + start * self.rs, rows: height, ..self }
    }

    #[inline]
    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.data[self.offset + i * self.rs + j * self.cs]
    }

    pub fn to_matrix(&self) -> Matrix {
        Matrix::from_fn(self.rows, self.cols, |i, j| self.at(i, j))
    }
}

impl<'a> MatMut<'a> {
    pub fn col_block(self, start: usize, width: usize) -> Self {
        assert!(start + width <= self.cols, "column block out of range");
        Self { offset: self.offset + start * self.cs, cols: width, ..self }
    }

    pub fn row_block(self, start: usize, height: usize) -> Self {
        assert!(start + height <= self.rows, "row block out of range");
        Self { offset: self.offset + start * self.rs, rows: height, ..self }
    }

    pub fn rb(&mut self) -> MatMut<'_> {
        MatMut {
            data: self.data,
            offset: self.offset,
            rows: self.rows,
            cols: self.cols,
            rs: self.rs,
            cs: self.cs,
        }
    }
}

fn check_extent(len: usize, offset: usize, rows: usize, cols: usize, rs: usize, cs: usize) {
    if rows > 0 && cols > 0 {
        let last = offset + (rows - 1) * rs + (cols - 1) * cs;
        assert!(last < len, "strided view exceeds its buffer");
    }
}

/// `c = alpha * a * b + beta * c` on strided views.
///
/// When `beta == 0` the previous contents of `c` are ignored (never read).
pub fn gemm(alpha: f64, a: MatRef<'_>, b: MatRef<'_>, beta: f64, c: MatMut<'_>) {
    assert_eq!(a.cols, b.rows, "gemm inner dimension");
    assert_eq!(c.rows, a.rows, "gemm output rows");
    assert_eq!(c.cols, b.cols, "gemm output cols");
    check_extent(a.data.len(), a.offset, a.rows, a.cols, a.rs, a.cs);
    check_extent(b.data.len(), b.offset, b.rows, b.cols, b.rs, b.cs);
    check_extent(c.data.len(), c.offset, c.rows, c.cols, c.rs, c.cs);
    if c.rows == 0 || c.cols == 0 {
        return;
    }
    if a.cols == 0 {
        // dgemm with k = 0 still applies beta; keep the same semantics.
        for i in 0..c.rows {
            for j in 0..c.cols {
                let idx = c.offset + i * c.rs + j * c.cs;
                c.data[idx] = if beta == 0.0 { 0.0 } else { beta * c.data[idx] };
            }
        }
        return;
    }
    // SAFETY: all three views were bounds checked above; `c` is uniquely
    // borrowed so it cannot alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            a.rows,
            a.cols,
            b.cols,
            alpha,
            a.data.as_ptr().add(a.offset),
            a.rs as isize,
            a.cs as isize,
            b.data.as_ptr().add(b.offset),
            b.rs as isize,
            b.cs as isize,
            beta,
            c.data.as_mut_ptr().add(c.offset),
            c.rs as isize,
            c.cs as isize,
        );
    }
}

/// Dense product `a * b`.
pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.rows {
        return dim_err(format!("matmul {:?} x {:?}", a.shape(), b.shape()));
    }
    let mut c = Matrix::zeros(a.rows, b.cols);
    gemm(1.0, a.view(), b.view(), 0.0, c.view_mut());
    Ok(c)
}

/// `a * bᵀ`
pub fn matmul_nt(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.cols {
        return dim_err(format!("matmul_nt {:?} x {:?}ᵀ", a.shape(), b.shape()));
    }
    let mut c = Matrix::zeros(a.rows, b.rows);
    gemm(1.0, a.view(), b.view().t(), 0.0, c.view_mut());
    Ok(c)
}

/// `aᵀ * b`
pub fn matmul_tn(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.rows != b.rows {
        return dim_err(format!("matmul_tn {:?}ᵀ x {:?}", a.shape(), b.shape()));
    }
    let mut c = Matrix::zeros(a.cols, b.cols);
    gemm(1.0, a.view().t(), b.view(), 0.0, c.view_mut());
    Ok(c)
}

/// Kronecker product of a 2×2 matrix with an arbitrary block: block `(u, v)`
/// of the result is `h[u][v] * a`.
pub fn kron2(h: &Matrix, a: &Matrix) -> Result<Matrix> {
    if h.shape() != (2, 2) {
        return dim_err(format!("kron2 expects a 2x2 left factor, got {:?}", h.shape()));
    }
    let (n, m) = a.shape();
    Ok(Matrix::from_fn(2 * n, 2 * m, |i, j| h.get(i / n, j / m) * a.get(i % n, j % m)))
}

pub fn frobenius(m: &Matrix) -> f64 {
    m.data.iter().map(|x| x * x).sum::<f64>().sqrt()
}
