//! Stage A training losses: label-smoothed cross-entropy, temperature-scaled
//! distillation and operator reconstruction.
//!
//! Every loss comes in a value-only form and a `*_with_grad` form returning
//! the gradient with respect to the student logits (or the PHM-path output).
//! Reductions are plain sequential sums so results do not depend on threading.

use crate::error::{dim_err, PhmError, Result};
use crate::linalg::Matrix;
use crate::phm::{dense_apply, ResidualBlock};

/// Label value marking a position that must not contribute to any loss.
pub const IGNORE_INDEX: i64 = -100;

/// Row indices whose label is supervised, and the labels themselves.
pub fn supervised(labels: &[i64]) -> (Vec<usize>, Vec<usize>) {
    labels
        .iter()
        .enumerate()
        .filter(|(_, &y)| y != IGNORE_INDEX)
        .map(|(i, &y)| (i, y as usize))
        .unzip()
}

/// Copies the listed rows of `m`.
pub fn gather_rows(m: &Matrix, rows: &[usize]) -> Matrix {
    Matrix::from_fn(rows.len(), m.cols(), |i, j| m.get(rows[i], j))
}

/// Row-wise `log softmax(z / temperature)`.
pub fn log_softmax(logits: &Matrix, temperature: f64) -> Matrix {
    let mut out = Matrix::zeros(logits.rows(), logits.cols());
    for i in 0..logits.rows() {
        let row = logits.row(i);
        let max = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b)) / temperature;
        let lse = row.iter().map(|&z| (z / temperature - max).exp()).sum::<f64>().ln() + max;
        for (o, &z) in out.row_mut(i).iter_mut().zip(row) {
            *o = z / temperature - lse;
        }
    }
    out
}

pub fn softmax(logits: &Matrix, temperature: f64) -> Matrix {
    log_softmax(logits, temperature).map(f64::exp)
}

fn check_targets(logits: &Matrix, targets: &[usize]) -> Result<()> {
    if targets.is_empty() || logits.rows() == 0 {
        return Err(PhmError::EmptyBatch);
    }
    if logits.rows() != targets.len() {
        return dim_err(format!("{} logit rows for {} targets", logits.rows(), targets.len()));
    }
    if logits.cols() < 2 {
        return dim_err("vocabulary must hold at least two classes");
    }
    if let Some(&t) = targets.iter().find(|&&t| t >= logits.cols()) {
        return dim_err(format!("target {t} outside vocabulary of {}", logits.cols()));
    }
    Ok(())
}

/// `−(1/Z) Σ [(1−ε) log p(y) + ε/(V−1) Σ_{v≠y} log p(v)]`
pub fn ce_label_smoothed(logits: &Matrix, targets: &[usize], epsilon: f64) -> Result<f64> {
    Ok(ce_label_smoothed_with_grad(logits, targets, epsilon)?.0)
}

/// Loss and gradient w.r.t. the logits. Because the smoothing weights sum
/// to one, the gradient per row is `(p − w) / Z`.
pub fn ce_label_smoothed_with_grad(
    logits: &Matrix,
    targets: &[usize],
    epsilon: f64,
) -> Result<(f64, Matrix)> {
    check_targets(logits, targets)?;
    let z = targets.len() as f64;
    let v = logits.cols();
    let off = epsilon / (v - 1) as f64;
    let logp = log_softmax(logits, 1.0);
    let mut loss = 0.0;
    let mut grad = Matrix::zeros(logits.rows(), v);
    for (i, &y) in targets.iter().enumerate() {
        let row = logp.row(i);
        let others: f64 = row.iter().enumerate().filter(|&(c, _)| c != y).map(|(_, &l)| l).sum();
        loss -= (1.0 - epsilon) * row[y] + off * others;
        for (c, g) in grad.row_mut(i).iter_mut().enumerate() {
            let w = if c == y { 1.0 - epsilon } else { off };
            *g = (row[c].exp() - w) / z;
        }
    }
    Ok((loss / z, grad))
}

/// `(T²/Z) Σ KL(softmax(z_T/T) ‖ softmax(z_S/T))`
pub fn kd_loss(teacher: &Matrix, student: &Matrix, temperature: f64) -> Result<f64> {
    Ok(kd_loss_with_grad(teacher, student, temperature)?.0)
}

/// Loss and gradient w.r.t. the student logits, `(T/Z)(q_S − p_T)`. The
/// teacher side is treated as a constant.
pub fn kd_loss_with_grad(teacher: &Matrix, student: &Matrix, temperature: f64) -> Result<(f64, Matrix)> {
    if teacher.shape() != student.shape() {
        return dim_err(format!("teacher {:?} vs student {:?}", teacher.shape(), student.shape()));
    }
    if teacher.rows() == 0 {
        return Err(PhmError::EmptyBatch);
    }
    if !(temperature > 0.0) {
        return Err(PhmError::Config("temperature must be positive".into()));
    }
    let z = teacher.rows() as f64;
    let lt = log_softmax(teacher, temperature);
    let ls = log_softmax(student, temperature);
    let mut kl = 0.0;
    let mut grad = Matrix::zeros(student.rows(), student.cols());
    for i in 0..teacher.rows() {
        for ((g, &a), &b) in grad.row_mut(i).iter_mut().zip(lt.row(i)).zip(ls.row(i)) {
            let p = a.exp();
            if p > 0.0 {
                kl += p * (a - b);
            }
            *g = temperature / z * (b.exp() - p);
        }
    }
    Ok((temperature * temperature / z * kl, grad))
}

/// How the per-layer squared error is averaged.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReconNorm {
    /// Mean over tokens of the squared L2 distance.
    PerToken,
    /// Additionally divided by `d_out`.
    PerTokenPerDim,
}

impl ReconNorm {
    pub fn from_flag(per_dim: bool) -> Self {
        if per_dim {
            Self::PerTokenPerDim
        } else {
            Self::PerToken
        }
    }

    /// Factor applied to `Σ_tokens ‖·‖²` for one layer.
    pub fn scale(&self, tokens: usize, d_out: usize) -> f64 {
        match self {
            Self::PerToken => 1.0 / tokens as f64,
            Self::PerTokenPerDim => 1.0 / (tokens * d_out) as f64,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReconTerm {
    pub value: f64,
    /// Set when no swapped layer contributed; the value is then zero.
    pub empty: bool,
}

/// `(1/|𝓜|) Σ_ℓ E_x ‖W^PHM x − W^dense x‖²` over the given layers and their
/// FFN inputs. Compares the two pure paths, independent of α.
pub fn recon_loss(layers: &[(&ResidualBlock, &Matrix)], norm: ReconNorm) -> Result<ReconTerm> {
    if layers.is_empty() {
        return Ok(ReconTerm { value: 0.0, empty: true });
    }
    let mut total = 0.0;
    for (block, x) in layers {
        if x.rows() == 0 {
            return Err(PhmError::EmptyBatch);
        }
        let phm = block.phm.apply(x)?;
        let dense = dense_apply(&block.dense, None, x)?;
        total += recon_layer(&phm, &dense, norm)?.0;
    }
    Ok(ReconTerm { value: total / layers.len() as f64, empty: false })
}

/// One layer's normalized squared error and `diff = phm − dense`.
pub fn recon_layer(phm: &Matrix, dense: &Matrix, norm: ReconNorm) -> Result<(f64, Matrix)> {
    let diff = phm.sub(dense)?;
    let sq: f64 = diff.data().iter().map(|d| d * d).sum();
    Ok((sq * norm.scale(diff.rows(), diff.cols()), diff))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::SeededRng;
    use crate::phm::{BasisSet, PhmOperator};
    use crate::projection::project_closed_b2;

    #[test]
    fn ce_two_class_uniform_is_ln2() {
        let logits = Matrix::from_rows(&[&[0.0, 0.0]]).unwrap();
        let l = ce_label_smoothed(&logits, &[0], 0.0).unwrap();
        assert!((l - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn ce_matches_direct_summation() {
        let logits = Matrix::from_rows(&[&[8.0, 0.0, 0.0, 0.0], &[0.0, 0.0, 9.0, 0.0]]).unwrap();
        let targets = [0, 2];
        let eps = 0.1;
        // direct per-term oracle
        let mut want = 0.0;
        for (i, &y) in targets.iter().enumerate() {
            let row = logits.row(i);
            let denom: f64 = row.iter().map(|z| z.exp()).sum();
            for (c, &zc) in row.iter().enumerate() {
                let logp = (zc.exp() / denom).ln();
                want -= if c == y { (1.0 - eps) * logp } else { eps / 3.0 * logp };
            }
        }
        want /= 2.0;
        let got = ce_label_smoothed(&logits, &targets, eps).unwrap();
        assert!((got - want).abs() < 1e-13, "{got} vs {want}");
    }

    #[test]
    fn ce_uniform_logits_is_ln_v_for_any_epsilon() {
        for v in [2, 5, 64] {
            for eps in [0.0, 0.1, 0.5, 0.9] {
                let logits = Matrix::zeros(3, v);
                let l = ce_label_smoothed(&logits, &[0, 1, v - 1], eps).unwrap();
                assert!((l - (v as f64).ln()).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn ce_errors() {
        assert!(matches!(ce_label_smoothed(&Matrix::zeros(0, 4), &[], 0.1), Err(PhmError::EmptyBatch)));
        assert!(ce_label_smoothed(&Matrix::zeros(1, 4), &[4], 0.1).is_err());
        assert!(ce_label_smoothed(&Matrix::zeros(2, 4), &[0], 0.1).is_err());
    }

    #[test]
    fn kd_identical_logits_is_zero() {
        let z = SeededRng::new(1).normal_matrix(4, 6, 2.0);
        assert!(kd_loss(&z, &z, 4.0).unwrap().abs() < 1e-15);
    }

    #[test]
    fn kd_hand_kl() {
        let t = Matrix::from_rows(&[&[1.0, 0.0]]).unwrap();
        let s = Matrix::from_rows(&[&[0.0, 1.0]]).unwrap();
        let e = 1f64.exp();
        let (p1, p2) = (e / (1.0 + e), 1.0 / (1.0 + e));
        let want = p1 * (p1 / p2).ln() + p2 * (p2 / p1).ln();
        assert!((kd_loss(&t, &s, 1.0).unwrap() - want).abs() < 1e-15);
    }

    #[test]
    fn kd_temperature_scaling_matches_direct_evaluation() {
        let mut rng = SeededRng::new(2);
        let t = rng.normal_matrix(3, 5, 2.0);
        let s = rng.normal_matrix(3, 5, 2.0);
        let direct = |temp: f64| {
            let mut acc = 0.0;
            for i in 0..3 {
                let pt: Vec<f64> = t.row(i).iter().map(|z| (z / temp).exp()).collect();
                let ps: Vec<f64> = s.row(i).iter().map(|z| (z / temp).exp()).collect();
                let (nt, ns): (f64, f64) = (pt.iter().sum(), ps.iter().sum());
                for c in 0..5 {
                    let (a, b) = (pt[c] / nt, ps[c] / ns);
                    acc += a * (a / b).ln();
                }
            }
            temp * temp / 3.0 * acc
        };
        for temp in [2.0, 4.0] {
            assert!((kd_loss(&t, &s, temp).unwrap() - direct(temp)).abs() < 1e-12);
        }
        let ratio = kd_loss(&t, &s, 4.0).unwrap() / kd_loss(&t, &s, 2.0).unwrap();
        assert!((ratio - direct(4.0) / direct(2.0)).abs() < 1e-10);
    }

    #[test]
    fn kd_shape_mismatch() {
        assert!(kd_loss(&Matrix::zeros(2, 3), &Matrix::zeros(2, 4), 1.0).is_err());
    }

    fn fd_check(f: impl Fn(&Matrix) -> f64, at: &Matrix, grad: &Matrix) {
        let h = 1e-6;
        for k in 0..at.len() {
            let mut p = at.clone();
            p.data_mut()[k] += h;
            let mut m = at.clone();
            m.data_mut()[k] -= h;
            let fd = (f(&p) - f(&m)) / (2.0 * h);
            let an = grad.data()[k];
            assert!((fd - an).abs() <= 1e-5 * fd.abs().max(an.abs()).max(1e-4), "{fd} vs {an}");
        }
    }

    #[test]
    fn loss_gradients_match_finite_differences() {
        let mut rng = SeededRng::new(3);
        let z = rng.normal_matrix(4, 7, 1.5);
        let targets = [1, 6, 0, 3];
        let (_, g) = ce_label_smoothed_with_grad(&z, &targets, 0.1).unwrap();
        fd_check(|m| ce_label_smoothed(m, &targets, 0.1).unwrap(), &z, &g);

        let t = rng.normal_matrix(4, 7, 1.5);
        let (_, g) = kd_loss_with_grad(&t, &z, 4.0).unwrap();
        fd_check(|m| kd_loss(&t, m, 4.0).unwrap(), &z, &g);
    }

    fn block(rng: &mut SeededRng, dense: Matrix) -> ResidualBlock {
        let op = project_closed_b2(&dense).unwrap().into_operator(BasisSet::new(2).unwrap()).unwrap();
        let bias = (0..dense.rows()).map(|_| rng.normal()).collect();
        ResidualBlock::new(dense, op, 0.3, bias).unwrap()
    }

    #[test]
    fn recon_zero_for_in_subspace_weights() {
        let mut rng = SeededRng::new(4);
        let cores = vec![rng.normal_matrix(3, 2, 1.0), rng.normal_matrix(3, 2, 1.0)];
        let dense = PhmOperator::new(BasisSet::new(2).unwrap(), cores).unwrap().expand();
        let b = block(&mut rng, dense);
        let x = rng.normal_matrix(5, 4, 1.0);
        let r = recon_loss(&[(&b, &x)], ReconNorm::PerTokenPerDim).unwrap();
        assert!(r.value < 1e-28);
    }

    #[test]
    fn recon_ignores_alpha() {
        let mut rng = SeededRng::new(5);
        let mut b = block(&mut rng, SeededRng::new(6).normal_matrix(4, 4, 1.0));
        let x = rng.normal_matrix(3, 4, 1.0);
        let a = recon_loss(&[(&b, &x)], ReconNorm::PerToken).unwrap().value;
        b.set_alpha(0.9).unwrap();
        assert_eq!(recon_loss(&[(&b, &x)], ReconNorm::PerToken).unwrap().value, a);
    }

    #[test]
    fn recon_hand_case() {
        // dense W = [[1, 2], [3, 4]], projection A₁ = ½(1+4) = 2.5,
        // A₂ = ½(3−2) = 0.5, so W^PHM = [[2.5, −0.5], [0.5, 2.5]].
        // x = [1, 1]: W x = [3, 7], W^PHM x = [2, 3]; squared distance 1 + 16.
        let mut rng = SeededRng::new(7);
        let b = block(&mut rng, Matrix::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]).unwrap());
        let x = Matrix::from_rows(&[&[1.0, 1.0]]).unwrap();
        let per_token = recon_loss(&[(&b, &x)], ReconNorm::PerToken).unwrap();
        assert!((per_token.value - 17.0).abs() < 1e-12);
        let per_dim = recon_loss(&[(&b, &x)], ReconNorm::PerTokenPerDim).unwrap();
        assert!((per_dim.value - 8.5).abs() < 1e-12);
    }

    #[test]
    fn recon_empty_set_flags() {
        let r = recon_loss(&[], ReconNorm::PerToken).unwrap();
        assert_eq!(r, ReconTerm { value: 0.0, empty: true });
    }

    #[test]
    fn masked_duplicates_change_nothing() {
        let mut rng = SeededRng::new(8);
        let logits = rng.normal_matrix(3, 5, 1.0);
        let teacher = rng.normal_matrix(3, 5, 1.0);
        let labels = [2i64, IGNORE_INDEX, 4];
        let mut doubled_logits = logits.clone().into_vec();
        doubled_logits.extend_from_slice(logits.data());
        let doubled_logits = Matrix::from_vec(6, 5, doubled_logits).unwrap();
        let mut doubled_teacher = teacher.clone().into_vec();
        doubled_teacher.extend_from_slice(teacher.data());
        let doubled_teacher = Matrix::from_vec(6, 5, doubled_teacher).unwrap();
        let doubled_labels = [2, IGNORE_INDEX, 4, IGNORE_INDEX, IGNORE_INDEX, IGNORE_INDEX];

        let eval = |l: &Matrix, t: &Matrix, labels: &[i64]| {
            let (rows, targets) = supervised(labels);
            let s = gather_rows(l, &rows);
            let tt = gather_rows(t, &rows);
            (ce_label_smoothed(&s, &targets, 0.1).unwrap(), kd_loss(&tt, &s, 4.0).unwrap())
        };
        let (c1, k1) = eval(&logits, &teacher, &labels);
        let (c2, k2) = eval(&doubled_logits, &doubled_teacher, &doubled_labels);
        assert!((c1 - c2).abs() < 1e-12 && (k1 - k2).abs() < 1e-12);
    }
}
