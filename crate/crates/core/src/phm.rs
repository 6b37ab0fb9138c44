//! The PHM linear operator `W = Σ_b H_b ⊗ A_b` and its residual blend with a
//! dense parent.
//!
//! Bases are the fixed canonical 2×2 matrices `I`, `J = [[0,−1],[1,0]]` and
//! `diag(1,−1)`. An operator with cores of shape `n × m` maps `d_in = 2m`
//! features to `d_out = 2n` features with `B·n·m` parameters instead of
//! `4·n·m`.
//!
//! [`PhmOperator::apply`] never materializes the `2n × 2m` matrix. The input is
//! split into column halves `x₁, x₂`, each non-zero basis entry `h_uv` costs
//! one `N×m · m×n` product `x_v A_bᵀ`, and the products landing in the same
//! output half are summed. Every canonical basis has exactly one non-zero per
//! row, so each output half collects `B` products and the combine step costs
//! `(B − 1)` additions per output entry, `(B − 1)·N·d_out` in total. Signs
//! are folded into the accumulation and cost nothing.

use serde::{Deserialize, Serialize};

use crate::error::{dim_err, PhmError, Result};
use crate::linalg::{gemm, kron2, Matrix};

const CANONICAL: [[[f64; 2]; 2]; 3] = [
    [[1.0, 0.0], [0.0, 1.0]],
    [[0.0, -1.0], [1.0, 0.0]],
    [[1.0, 0.0], [0.0, -1.0]],
];

/// Fixed canonical basis set with `B ∈ {2, 3}` members.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "usize", into = "usize")]
pub struct BasisSet {
    count: usize,
}

impl BasisSet {
    pub fn new(count: usize) -> Result<Self> {
        match count {
            2 | 3 => Ok(Self { count }),
            _ => Err(PhmError::Basis(format!("basis count must be 2 or 3, got {count}"))),
        }
    }

    pub fn count(&self) -> usize {
        self.count
    }

    /// Entry `h_uv` of basis `b`.
    #[inline]
    pub fn coeff(&self, b: usize, u: usize, v: usize) -> f64 {
        CANONICAL[b][u][v]
    }

    pub fn basis(&self, b: usize) -> Matrix {
        let h = CANONICAL[b];
        Matrix::from_rows(&[&h[0], &h[1]]).expect("2x2")
    }

    pub fn bases(&self) -> Vec<Matrix> {
        (0..self.count).map(|b| self.basis(b)).collect()
    }

    /// Basis coefficient matrix `𝖧 ∈ ℝ^{4×B}`, rows ordered `h₁₁, h₁₂, h₂₁, h₂₂`.
    pub fn coefficient_matrix(&self) -> Matrix {
        Matrix::from_fn(4, self.count, |row, b| self.coeff(b, row / 2, row % 2))
    }

    /// Non-zero basis entries as `(u, v, b, h_uv)`, grouped by output half `u`.
    pub fn terms(&self) -> Vec<(usize, usize, usize, f64)> {
        let mut out = Vec::new();
        for u in 0..2 {
            for b in 0..self.count {
                for v in 0..2 {
                    let h = self.coeff(b, u, v);
                    if h != 0.0 {
                        out.push((u, v, b, h));
                    }
                }
            }
        }
        out
    }
}

impl TryFrom<usize> for BasisSet {
    type Error = PhmError;
    fn try_from(v: usize) -> Result<Self> {
        Self::new(v)
    }
}

impl From<BasisSet> for usize {
    fn from(b: BasisSet) -> usize {
        b.count
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhmOperator {
    basis: BasisSet,
    cores: Vec<Matrix>,
}

/// Gradients of `Σ upstream ⊙ apply(op, X)`.
#[derive(Debug, Clone)]
pub struct PhmGrads {
    pub cores: Vec<Matrix>,
    pub input: Matrix,
}

impl PhmOperator {
    pub fn new(basis: BasisSet, cores: Vec<Matrix>) -> Result<Self> {
        if cores.len() != basis.count() {
            return Err(PhmError::Basis(format!(
                "{} cores supplied for {} bases",
                cores.len(),
                basis.count()
            )));
        }
        let shape = cores[0].shape();
        if shape.0 == 0 || shape.1 == 0 {
            return dim_err("cores must be non-empty");
        }
        if cores.iter().any(|c| c.shape() != shape) {
            return dim_err("all cores must share one shape");
        }
        Ok(Self { basis, cores })
    }

    pub fn zeros(basis: BasisSet, n: usize, m: usize) -> Result<Self> {
        Self::new(basis, vec![Matrix::zeros(n, m); basis.count()])
    }

    pub fn basis(&self) -> BasisSet {
        self.basis
    }

    pub fn cores(&self) -> &[Matrix] {
        &self.cores
    }

    pub fn cores_mut(&mut self) -> &mut [Matrix] {
        &mut self.cores
    }

    pub fn into_cores(self) -> Vec<Matrix> {
        self.cores
    }

    /// Core shape `(n, m)`.
    pub fn core_shape(&self) -> (usize, usize) {
        self.cores[0].shape()
    }

    pub fn d_in(&self) -> usize {
        2 * self.core_shape().1
    }

    pub fn d_out(&self) -> usize {
        2 * self.core_shape().0
    }

    /// Materializes `Σ_b H_b ⊗ A_b`.
    pub fn expand(&self) -> Matrix {
        let (n, m) = self.core_shape();
        let mut w = Matrix::zeros(2 * n, 2 * m);
        for (b, core) in self.cores.iter().enumerate() {
            let k = kron2(&self.basis.basis(b), core).expect("2x2 basis");
            w.axpy(1.0, &k).expect("same shape");
        }
        w
    }

    /// `X · expand()ᵀ` computed blockwise.
    pub fn apply(&self, x: &Matrix) -> Result<Matrix> {
        let (n, m) = self.core_shape();
        if x.cols() != 2 * m {
            return dim_err(format!("PHM input has {} columns, operator expects {}", x.cols(), 2 * m));
        }
        let mut y = Matrix::zeros(x.rows(), 2 * n);
        let mut started = [false; 2];
        for (u, v, b, h) in self.basis.terms() {
            let beta = if started[u] { 1.0 } else { 0.0 };
            started[u] = true;
            gemm(
                h,
                x.view().col_block(v * m, m),
                self.cores[b].view().t(),
                beta,
                y.view_mut().col_block(u * n, n),
            );
        }
        Ok(y)
    }

    /// Exact gradients of `Σ upstream ⊙ apply(self, x)` w.r.t. cores and input.
    pub fn apply_backward(&self, x: &Matrix, upstream: &Matrix) -> Result<PhmGrads> {
        let cores = self.core_grads(x, upstream, 1.0)?;
        let input = self.input_grad(upstream, 1.0)?;
        Ok(PhmGrads { cores, input })
    }

    /// `scale · ∂/∂A_b`, one matrix per core.
    pub fn core_grads(&self, x: &Matrix, upstream: &Matrix, scale: f64) -> Result<Vec<Matrix>> {
        let (n, m) = self.core_shape();
        self.check_backward_shapes(x, upstream)?;
        let mut grads = vec![Matrix::zeros(n, m); self.basis.count()];
        let mut started = vec![false; self.basis.count()];
        for (u, v, b, h) in self.basis.terms() {
            let beta = if started[b] { 1.0 } else { 0.0 };
            started[b] = true;
            gemm(
                scale * h,
                upstream.view().col_block(u * n, n).t(),
                x.view().col_block(v * m, m),
                beta,
                grads[b].view_mut(),
            );
        }
        Ok(grads)
    }

    /// Accumulates `scale · ∂/∂A_b` into existing gradient buffers.
    pub fn accumulate_core_grads(
        &self,
        x: &Matrix,
        upstream: &Matrix,
        scale: f64,
        into: &mut [Matrix],
    ) -> Result<()> {
        let (n, m) = self.core_shape();
        self.check_backward_shapes(x, upstream)?;
        for (u, v, b, h) in self.basis.terms() {
            gemm(
                scale * h,
                upstream.view().col_block(u * n, n).t(),
                x.view().col_block(v * m, m),
                1.0,
                into[b].view_mut(),
            );
        }
        Ok(())
    }

    /// `scale · ∂/∂X`.
    pub fn input_grad(&self, upstream: &Matrix, scale: f64) -> Result<Matrix> {
        let (n, m) = self.core_shape();
        if upstream.cols() != 2 * n {
            return dim_err(format!("upstream has {} columns, expected {}", upstream.cols(), 2 * n));
        }
        let mut dx = Matrix::zeros(upstream.rows(), 2 * m);
        let mut started = [false; 2];
        for (u, v, b, h) in self.basis.terms() {
            let beta = if started[v] { 1.0 } else { 0.0 };
            started[v] = true;
            gemm(
                scale * h,
                upstream.view().col_block(u * n, n),
                self.cores[b].view(),
                beta,
                dx.view_mut().col_block(v * m, m),
            );
        }
        Ok(dx)
    }

    fn check_backward_shapes(&self, x: &Matrix, upstream: &Matrix) -> Result<()> {
        let (n, m) = self.core_shape();
        if x.cols() != 2 * m || upstream.cols() != 2 * n || x.rows() != upstream.rows() {
            return dim_err(format!(
                "backward shapes x {:?}, upstream {:?} for cores {n}x{m}",
                x.shape(),
                upstream.shape()
            ));
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        let (n, m) = self.core_shape();
        phm_param_count(self.basis.count(), n, m)
    }

    pub fn flop_count(&self, tokens: usize) -> usize {
        phm_flops(self.basis.count(), tokens, self.d_in(), self.d_out())
    }
}

/// Parameters of a PHM operator with `b` cores of shape `n × m`.
pub fn phm_param_count(b: usize, n: usize, m: usize) -> usize {
    b * n * m
}

/// Parameters of the dense `2n × 2m` reference.
pub fn dense_param_count(n: usize, m: usize) -> usize {
    4 * n * m
}

/// Dense `N × d_in → N × d_out` product, counting a multiply-add as two FLOPs.
pub fn dense_flops(tokens: usize, d_in: usize, d_out: usize) -> usize {
    2 * tokens * d_in * d_out
}

/// Additions spent summing block products into the output halves.
pub fn phm_combine_flops(b: usize, tokens: usize, d_out: usize) -> usize {
    b.saturating_sub(1) * tokens * d_out
}

/// Blockwise PHM application: `B·N·d_in·d_out` for the products plus the
/// combine additions.
pub fn phm_flops(b: usize, tokens: usize, d_in: usize, d_out: usize) -> usize {
    b * tokens * d_in * d_out + phm_combine_flops(b, tokens, d_out)
}

/// Constant `c` in `combine = c·N·(d_in + d_out)` for the given shape.
pub fn phm_combine_constant(b: usize, d_in: usize, d_out: usize) -> f64 {
    (b.saturating_sub(1) * d_out) as f64 / (d_in + d_out) as f64
}

/// `X · Wᵀ + bias` for a dense weight `W` of shape `d_out × d_in`.
pub fn dense_apply(w: &Matrix, bias: Option<&[f64]>, x: &Matrix) -> Result<Matrix> {
    if x.cols() != w.cols() {
        return dim_err(format!("dense input has {} columns, weight expects {}", x.cols(), w.cols()));
    }
    let mut y = Matrix::zeros(x.rows(), w.rows());
    gemm(1.0, x.view(), w.view().t(), 0.0, y.view_mut());
    if let Some(b) = bias {
        y.add_row_vector(b);
    }
    Ok(y)
}

/// Residual blend `(1 − α)·W + α·W^PHM` with a dense bias.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResidualBlock {
    pub dense: Matrix,
    pub phm: PhmOperator,
    alpha: f64,
    pub bias: Vec<f64>,
}

impl ResidualBlock {
    pub fn new(dense: Matrix, phm: PhmOperator, alpha: f64, bias: Vec<f64>) -> Result<Self> {
        if dense.shape() != (phm.d_out(), phm.d_in()) {
            return dim_err(format!(
                "dense {:?} does not match PHM expansion {}x{}",
                dense.shape(),
                phm.d_out(),
                phm.d_in()
            ));
        }
        if bias.len() != dense.rows() {
            return dim_err("bias length must equal d_out");
        }
        check_alpha(alpha)?;
        Ok(Self { dense, phm, alpha, bias })
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn set_alpha(&mut self, alpha: f64) -> Result<()> {
        check_alpha(alpha)?;
        self.alpha = alpha;
        Ok(())
    }

    /// `(1−α)·X·Wᵀ + α·apply(phm, X) + bias` at the stored α.
    pub fn apply(&self, x: &Matrix) -> Result<Matrix> {
        self.apply_at(x, self.alpha)
    }

    /// As [`apply`](Self::apply) at an explicit α. The endpoints evaluate only
    /// one path, so α = 0 reproduces the dense layer bit for bit.
    pub fn apply_at(&self, x: &Matrix, alpha: f64) -> Result<Matrix> {
        check_alpha(alpha)?;
        if alpha == 0.0 {
            return dense_apply(&self.dense, Some(&self.bias), x);
        }
        let mut y = self.phm.apply(x)?;
        if alpha != 1.0 {
            let dense = dense_apply(&self.dense, None, x)?;
            for (o, &d) in y.data_mut().iter_mut().zip(dense.data()) {
                *o = (1.0 - alpha) * d + alpha * *o;
            }
        }
        y.add_row_vector(&self.bias);
        Ok(y)
    }

    pub fn param_count_phm(&self) -> usize {
        self.phm.param_count()
    }

    pub fn param_count_dense(&self) -> usize {
        self.dense.len()
    }
}

fn check_alpha(alpha: f64) -> Result<()> {
    if (0.0..=1.0).contains(&alpha) {
        Ok(())
    } else {
        Err(PhmError::Config(format!("alpha must lie in [0, 1], got {alpha}")))
    }
}
