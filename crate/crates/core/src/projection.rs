//! Dense → PHM initialization by Frobenius-optimal projection.
//!
//! Every core entry `(i, j)` only interacts with the four quadrant entries
//! `p_ij, q_ij, r_ij, s_ij`, so the projection decouples into `n·m` tiny
//! `4 × B` least-squares problems that all share the basis coefficient
//! matrix `𝖧`. One pseudoinverse `𝖧⁺` (B × 4) solves all of them.

use serde::{Deserialize, Serialize};

use crate::error::{dim_err, PhmError, Result};
use crate::linalg::{frobenius, pinv, Matrix};
use crate::phm::{BasisSet, PhmOperator};

/// Quadrants of a `2n × 2m` matrix: `[[p, q], [r, s]]`.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockPartition {
    pub p: Matrix,
    pub q: Matrix,
    pub r: Matrix,
    pub s: Matrix,
}

impl BlockPartition {
    pub fn reassemble(&self) -> Matrix {
        let (n, m) = self.p.shape();
        Matrix::from_fn(2 * n, 2 * m, |i, j| {
            let block = match (i < n, j < m) {
                (true, true) => &self.p,
                (true, false) => &self.q,
                (false, true) => &self.r,
                (false, false) => &self.s,
            };
            block.get(i % n, j % m)
        })
    }

    fn quadrants(&self) -> [&Matrix; 4] {
        [&self.p, &self.q, &self.r, &self.s]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectionResult {
    pub cores: Vec<Matrix>,
    /// `‖W − Σ H_b ⊗ A_b‖_F`
    pub residual_error: f64,
}

impl ProjectionResult {
    pub fn into_operator(self, basis: BasisSet) -> Result<PhmOperator> {
        PhmOperator::new(basis, self.cores)
    }
}

fn check_even(w: &Matrix) -> Result<(usize, usize)> {
    let (rows, cols) = w.shape();
    if rows == 0 || cols == 0 || rows % 2 != 0 || cols % 2 != 0 {
        return dim_err(format!("PHM projection needs even, non-zero dimensions, got {rows}x{cols}"));
    }
    Ok((rows / 2, cols / 2))
}

pub fn partition(w: &Matrix) -> Result<BlockPartition> {
    let (n, m) = check_even(w)?;
    let quad = |bi: usize, bj: usize| Matrix::from_fn(n, m, |i, j| w.get(bi * n + i, bj * m + j));
    Ok(BlockPartition { p: quad(0, 0), q: quad(0, 1), r: quad(1, 0), s: quad(1, 1) })
}

fn finish(w: &Matrix, basis: BasisSet, cores: Vec<Matrix>) -> Result<ProjectionResult> {
    let op = PhmOperator::new(basis, cores)?;
    let residual_error = frobenius(&w.sub(&op.expand())?);
    Ok(ProjectionResult { cores: op.into_cores(), residual_error })
}

/// Closed form for the `(I, J)` basis: `A₁ = ½(p + s)`, `A₂ = ½(r − q)`.
pub fn project_closed_b2(w: &Matrix) -> Result<ProjectionResult> {
    let bp = partition(w)?;
    let a1 = bp.p.zip_with(&bp.s, |a, b| 0.5 * (a + b))?;
    let a2 = bp.r.zip_with(&bp.q, |a, b| 0.5 * (a - b))?;
    finish(w, BasisSet::new(2)?, vec![a1, a2])
}

/// General least-squares projection onto `span{H_b ⊗ ·}`.
pub fn project_lsq(w: &Matrix, basis: BasisSet) -> Result<ProjectionResult> {
    let bp = partition(w)?;
    let h = basis.coefficient_matrix();
    let rank = crate::linalg::PivotedQr::new(&h, true)?.rank;
    if rank < basis.count() {
        return Err(PhmError::Basis("basis coefficient matrix is rank deficient".into()));
    }
    let h_pinv = pinv(&h)?;
    let (n, m) = bp.p.shape();
    let quads = bp.quadrants();
    let cores = (0..basis.count())
        .map(|b| {
            Matrix::from_fn(n, m, |i, j| {
                (0..4).map(|row| h_pinv.get(b, row) * quads[row].get(i, j)).sum()
            })
        })
        .collect();
    finish(w, basis, cores)
}

/// Closed form when `B = 2`, least squares otherwise.
pub fn project(w: &Matrix, basis: BasisSet) -> Result<ProjectionResult> {
    if basis.count() == 2 {
        project_closed_b2(w)
    } else {
        project_lsq(w, basis)
    }
}

pub fn projection_error(w: &Matrix, basis: BasisSet) -> Result<f64> {
    Ok(project_lsq(w, basis)?.residual_error)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{kron2, SeededRng};

    fn b(n: usize) -> BasisSet {
        BasisSet::new(n).unwrap()
    }

    #[test]
    fn partition_2x2() {
        let w = Matrix::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]).unwrap();
        let bp = partition(&w).unwrap();
        assert_eq!(bp.p.data(), &[1.0]);
        assert_eq!(bp.q.data(), &[2.0]);
        assert_eq!(bp.r.data(), &[3.0]);
        assert_eq!(bp.s.data(), &[4.0]);
    }

    #[test]
    fn partition_identity() {
        let bp = partition(&Matrix::identity(4)).unwrap();
        assert_eq!(bp.p, Matrix::identity(2));
        assert_eq!(bp.s, Matrix::identity(2));
        assert_eq!(bp.q, Matrix::zeros(2, 2));
        assert_eq!(bp.r, Matrix::zeros(2, 2));
    }

    #[test]
    fn partition_round_trips() {
        let w = SeededRng::new(1).normal_matrix(6, 4, 1.0);
        assert_eq!(partition(&w).unwrap().reassemble(), w);
    }

    #[test]
    fn odd_dims_are_refused() {
        assert!(matches!(partition(&Matrix::zeros(3, 4)), Err(PhmError::Dimension(_))));
        assert!(project_closed_b2(&Matrix::zeros(4, 5)).is_err());
        assert!(project_lsq(&Matrix::zeros(5, 4), b(3)).is_err());
    }

    #[test]
    fn closed_form_fixed_point() {
        let mut rng = SeededRng::new(2);
        let cores = vec![rng.normal_matrix(3, 4, 1.0), rng.normal_matrix(3, 4, 1.0)];
        let w = PhmOperator::new(b(2), cores.clone()).unwrap().expand();
        let res = project_closed_b2(&w).unwrap();
        assert_eq!(res.cores, cores);
        assert_eq!(res.residual_error, 0.0);
    }

    #[test]
    fn identity_projects_to_identity_core() {
        let res = project_closed_b2(&Matrix::identity(4)).unwrap();
        assert_eq!(res.cores[0], Matrix::identity(2));
        assert_eq!(res.cores[1], Matrix::zeros(2, 2));
    }

    #[test]
    fn closed_form_agrees_with_lsq() {
        let mut rng = SeededRng::new(3);
        let w = rng.normal_matrix(8, 8, 1.0);
        let a = project_closed_b2(&w).unwrap();
        let l = project_lsq(&w, b(2)).unwrap();
        for (x, y) in a.cores.iter().zip(&l.cores) {
            assert!(x.max_abs_diff(y) < 1e-9);
        }
    }

    #[test]
    fn b3_in_subspace_recovery() {
        let mut rng = SeededRng::new(4);
        let cores: Vec<Matrix> = (0..3).map(|_| rng.normal_matrix(2, 3, 1.0)).collect();
        let w = PhmOperator::new(b(3), cores.clone()).unwrap().expand();
        let res = project_lsq(&w, b(3)).unwrap();
        assert!(res.residual_error < 1e-9);
        for (x, y) in res.cores.iter().zip(&cores) {
            assert!(x.max_abs_diff(y) < 1e-12);
        }
    }

    #[test]
    fn diag_matches_per_entry_normal_equations() {
        // W = diag(2, 0, 0, 0): only position (0, 0) is non-zero, with
        // w = [p, q, r, s] = [2, 0, 0, 0]. For 𝖧 = [I, J] columns
        // 𝖧ᵀ𝖧 = 2I, 𝖧ᵀw = [2, 0] so a = [1, 0].
        let mut w = Matrix::zeros(4, 4);
        w.set(0, 0, 2.0);
        let res = project_lsq(&w, b(2)).unwrap();
        let mut want1 = Matrix::zeros(2, 2);
        want1.set(0, 0, 1.0);
        assert!(res.cores[0].max_abs_diff(&want1) < 1e-15);
        assert!(res.cores[1].max_abs_diff(&Matrix::zeros(2, 2)) < 1e-15);
        // residual: the s-quadrant now holds 1 where W has 0, and p holds 1 vs 2
        assert!((res.residual_error - 2f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn h3_component_is_invisible_to_b2() {
        let mut rng = SeededRng::new(5);
        let c = rng.normal_matrix(3, 2, 1.0);
        let w = kron2(&b(3).basis(2), &c).unwrap();
        assert!(projection_error(&w, b(3)).unwrap() < 1e-12);
        // H₃ is orthogonal to I and J, so the B = 2 projection is zero and
        // the error is the full norm of W.
        let e2 = projection_error(&w, b(2)).unwrap();
        assert!((e2 - frobenius(&w)).abs() < 1e-12);
    }

    #[test]
    fn b3_keeps_b2_cores() {
        let mut rng = SeededRng::new(6);
        let w = rng.normal_matrix(6, 8, 1.0);
        let two = project_lsq(&w, b(2)).unwrap();
        let three = project_lsq(&w, b(3)).unwrap();
        for k in 0..2 {
            assert!(two.cores[k].max_abs_diff(&three.cores[k]) < 1e-9);
        }
        assert!(three.residual_error <= two.residual_error + 1e-12);
    }

    #[test]
    fn projection_is_locally_optimal() {
        let mut rng = SeededRng::new(7);
        let w = rng.normal_matrix(4, 6, 1.0);
        for basis in [b(2), b(3)] {
            let res = project_lsq(&w, basis).unwrap();
            for _ in 0..20 {
                let mut cores = res.cores.clone();
                let c = rng.below(cores.len());
                let k = rng.below(cores[c].len());
                let delta = if rng.uniform() < 0.5 { 1e-3 } else { -1e-3 };
                cores[c].data_mut()[k] += delta;
                let op = PhmOperator::new(basis, cores).unwrap();
                let err = frobenius(&w.sub(&op.expand()).unwrap());
                assert!(err >= res.residual_error);
            }
        }
    }
}
