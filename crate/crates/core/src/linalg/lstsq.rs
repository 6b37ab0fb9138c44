//! Least squares through Householder QR with column pivoting.
//!
//! Rank-deficient systems are finished with a second (unpivoted) QR of the
//! leading trapezoid, i.e. a complete orthogonal decomposition, which yields
//! the minimum-norm minimizer.

use super::Matrix;
use crate::error::{dim_err, PhmError, Result};

/// Householder QR with column pivoting: `M P = Q R`.
#[derive(Debug, Clone)]
pub struct PivotedQr {
    /// Explicit orthogonal factor, `p × p`.
    pub q: Matrix,
    /// Upper trapezoidal factor, `p × q`.
    pub r: Matrix,
    /// Column `j` of `R` corresponds to column `perm[j]` of the input.
    pub perm: Vec<usize>,
    /// Numerical rank.
    pub rank: usize,
}

/// Applies the reflector `I - 2 v vᵀ / (vᵀv)` to rows `k..` of `m` from the left.
fn reflect_rows(m: &mut Matrix, v: &[f64], k: usize) {
    let vtv: f64 = v.iter().map(|x| x * x).sum();
    if vtv == 0.0 {
        return;
    }
    for j in 0..m.cols() {
        let dot: f64 = v.iter().enumerate().map(|(i, vi)| vi * m.get(k + i, j)).sum();
        let s = 2.0 * dot / vtv;
        for (i, vi) in v.iter().enumerate() {
            let cur = m.get(k + i, j);
            m.set(k + i, j, cur - s * vi);
        }
    }
}

fn householder_vector(col: &[f64]) -> Vec<f64> {
    let norm = col.iter().map(|x| x * x).sum::<f64>().sqrt();
    let mut v = col.to_vec();
    if norm == 0.0 {
        return v;
    }
    let alpha = if col[0] >= 0.0 { -norm } else { norm };
    v[0] -= alpha;
    v
}

impl PivotedQr {
    pub fn new(m: &Matrix, pivot: bool) -> Result<Self> {
        m.ensure_finite("least-squares matrix")?;
        let (p, q) = m.shape();
        let mut r = m.clone();
        // accumulate Qᵀ by applying the reflectors to the identity
        let mut qt = Matrix::identity(p);
        let mut perm: Vec<usize> = (0..q).collect();
        let steps = p.min(q);
        for k in 0..steps {
            if pivot {
                let norm_sq = |r: &Matrix, j: usize| (k..p).map(|i| r.get(i, j).powi(2)).sum::<f64>();
                let mut best = k;
                let mut best_norm = norm_sq(&r, k);
                for j in k + 1..q {
                    let nj = norm_sq(&r, j);
                    if nj > best_norm {
                        best = j;
                        best_norm = nj;
                    }
                }
                if best != k {
                    for i in 0..p {
                        let tmp = r.get(i, k);
                        r.set(i, k, r.get(i, best));
                        r.set(i, best, tmp);
                    }
                    perm.swap(k, best);
                }
            }
            let col: Vec<f64> = (k..p).map(|i| r.get(i, k)).collect();
            let v = householder_vector(&col);
            reflect_rows(&mut r, &v, k);
            reflect_rows(&mut qt, &v, k);
            for i in k + 1..p {
                r.set(i, k, 0.0);
            }
        }
        let scale = (0..steps).map(|i| r.get(i, i).abs()).fold(0.0, f64::max);
        let tol = (p.max(q) as f64) * f64::EPSILON * scale;
        let rank = (0..steps).take_while(|&i| r.get(i, i).abs() > tol).count();
        Ok(Self { q: qt.transpose(), r, perm, rank })
    }
}

/// Solves `min ‖M x − y‖₂`, returning the minimum-norm minimizer.
pub fn lstsq(m: &Matrix, y: &[f64]) -> Result<Vec<f64>> {
    let (p, q) = m.shape();
    if p < q {
        return dim_err(format!("lstsq needs at least as many rows as columns, got {p}x{q}"));
    }
    if y.len() != p {
        return dim_err(format!("rhs of length {} for {p} rows", y.len()));
    }
    if y.iter().any(|v| !v.is_finite()) {
        return Err(PhmError::Numeric("least-squares rhs contains non-finite entries".into()));
    }
    let qr = PivotedQr::new(m, true)?;
    let k = qr.rank;
    // c = (Qᵀ y)[..k]
    let c: Vec<f64> = (0..k).map(|i| (0..p).map(|j| qr.q.get(j, i) * y[j]).sum()).collect();

    let z = if k == q {
        back_substitute(&qr.r, &c)
    } else if k == 0 {
        vec![0.0; q]
    } else {
        // R₁ = leading k rows of R (k × q). Factor R₁ᵀ = Z U so R₁ = Uᵀ Zᵀ
        // and the minimum-norm solution is z = Z[:, :k] U⁻ᵀ c.
        let r1t = Matrix::from_fn(q, k, |i, j| qr.r.get(j, i));
        let inner = PivotedQr::new(&r1t, false)?;
        let mut w = vec![0.0; k];
        for i in 0..k {
            let s: f64 = (0..i).map(|j| inner.r.get(j, i) * w[j]).sum();
            w[i] = (c[i] - s) / inner.r.get(i, i);
        }
        (0..q).map(|i| (0..k).map(|j| inner.q.get(i, j) * w[j]).sum()).collect()
    };

    let mut x = vec![0.0; q];
    for (j, &pj) in qr.perm.iter().enumerate() {
        x[pj] = z[j];
    }
    Ok(x)
}

fn back_substitute(r: &Matrix, c: &[f64]) -> Vec<f64> {
    let k = c.len();
    let mut z = vec![0.0; k];
    for i in (0..k).rev() {
        let s: f64 = (i + 1..k).map(|j| r.get(i, j) * z[j]).sum();
        z[i] = (c[i] - s) / r.get(i, i);
    }
    z
}

/// Moore–Penrose pseudoinverse of a full-column-rank tall matrix, column by
/// column through [`lstsq`].
pub fn pinv(m: &Matrix) -> Result<Matrix> {
    let (p, q) = m.shape();
    let mut out = Matrix::zeros(q, p);
    for j in 0..p {
        let mut e = vec![0.0; p];
        e[j] = 1.0;
        let x = lstsq(m, &e)?;
        for i in 0..q {
            out.set(i, j, x[i]);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{matmul, matmul_tn, SeededRng};

    fn residual(m: &Matrix, x: &[f64], y: &[f64]) -> Vec<f64> {
        (0..m.rows())
            .map(|i| (0..m.cols()).map(|j| m.get(i, j) * x[j]).sum::<f64>() - y[i])
            .collect()
    }

    /// Normal-equations oracle via Gauss–Jordan on MᵀM.
    fn normal_equations(m: &Matrix, y: &[f64]) -> Vec<f64> {
        let q = m.cols();
        let mtm = matmul_tn(m, m).unwrap();
        let mty: Vec<f64> = (0..q).map(|j| (0..m.rows()).map(|i| m.get(i, j) * y[i]).sum()).collect();
        let mut aug = Matrix::from_fn(q, q + 1, |i, j| if j < q { mtm.get(i, j) } else { mty[i] });
        for c in 0..q {
            let piv = (c..q).max_by(|&a, &b| aug.get(a, c).abs().total_cmp(&aug.get(b, c).abs())).unwrap();
            for j in 0..=q {
                let t = aug.get(c, j);
                aug.set(c, j, aug.get(piv, j));
                aug.set(piv, j, t);
            }
            let d = aug.get(c, c);
            for j in 0..=q {
                aug.set(c, j, aug.get(c, j) / d);
            }
            for i in 0..q {
                if i != c {
                    let f = aug.get(i, c);
                    for j in 0..=q {
                        aug.set(i, j, aug.get(i, j) - f * aug.get(c, j));
                    }
                }
            }
        }
        (0..q).map(|i| aug.get(i, q)).collect()
    }

    #[test]
    fn square_invertible_is_exact() {
        let mut rng = SeededRng::new(4);
        let m = rng.normal_matrix(4, 4, 1.0);
        let y: Vec<f64> = (0..4).map(|_| rng.normal()).collect();
        let x = lstsq(&m, &y).unwrap();
        let r = residual(&m, &x, &y);
        assert!(r.iter().map(|v| v * v).sum::<f64>().sqrt() < 1e-10);
    }

    #[test]
    fn mean_of_observations() {
        let m = Matrix::from_rows(&[&[1.0], &[1.0]]).unwrap();
        let x = lstsq(&m, &[1.0, 3.0]).unwrap();
        assert!((x[0] - 2.0).abs() < 1e-14);
    }

    #[test]
    fn overdetermined_matches_normal_equations() {
        let mut rng = SeededRng::new(21);
        for _ in 0..20 {
            let m = rng.normal_matrix(6, 3, 1.0);
            let y: Vec<f64> = (0..6).map(|_| rng.normal()).collect();
            let x = lstsq(&m, &y).unwrap();
            let oracle = normal_equations(&m, &y);
            for (a, b) in x.iter().zip(&oracle) {
                assert!((a - b).abs() <= 1e-8 * b.abs().max(1e-3), "{a} vs {b}");
            }
        }
    }

    #[test]
    fn residual_is_orthogonal_to_columns() {
        let mut rng = SeededRng::new(8);
        let m = rng.normal_matrix(9, 4, 2.0);
        let y: Vec<f64> = (0..9).map(|_| rng.normal()).collect();
        let x = lstsq(&m, &y).unwrap();
        let r = residual(&m, &x, &y);
        let scale = crate::linalg::frobenius(&m) * y.iter().map(|v| v * v).sum::<f64>().sqrt();
        for j in 0..4 {
            let g: f64 = (0..9).map(|i| m.get(i, j) * r[i]).sum();
            assert!(g.abs() < 1e-8 * scale);
        }
    }

    #[test]
    fn rank_deficient_gives_minimum_norm() {
        // duplicated column: x1 + x2 = 2 has minimum-norm solution (1, 1)
        let m = Matrix::from_rows(&[&[1.0, 1.0], &[1.0, 1.0], &[1.0, 1.0]]).unwrap();
        let x = lstsq(&m, &[2.0, 2.0, 2.0]).unwrap();
        assert!((x[0] - 1.0).abs() < 1e-12 && (x[1] - 1.0).abs() < 1e-12, "{x:?}");

        // zero column contributes nothing
        let m = Matrix::from_rows(&[&[1.0, 0.0], &[1.0, 0.0]]).unwrap();
        let x = lstsq(&m, &[1.0, 3.0]).unwrap();
        assert!((x[0] - 2.0).abs() < 1e-12 && x[1].abs() < 1e-12);
    }

    #[test]
    fn rejects_bad_input() {
        let m = Matrix::from_rows(&[&[1.0, f64::NAN], &[0.0, 1.0]]).unwrap();
        assert!(matches!(lstsq(&m, &[1.0, 1.0]), Err(PhmError::Numeric(_))));
        let m = Matrix::identity(2);
        assert!(matches!(lstsq(&m, &[1.0, f64::INFINITY]), Err(PhmError::Numeric(_))));
        let wide = Matrix::zeros(1, 2);
        assert!(matches!(lstsq(&wide, &[1.0]), Err(PhmError::Dimension(_))));
    }

    #[test]
    fn pinv_of_full_rank_is_left_inverse() {
        let mut rng = SeededRng::new(13);
        let m = rng.normal_matrix(5, 3, 1.0);
        let p = pinv(&m).unwrap();
        let eye = matmul(&p, &m).unwrap();
        assert!(eye.max_abs_diff(&Matrix::identity(3)) < 1e-12);
    }
}
