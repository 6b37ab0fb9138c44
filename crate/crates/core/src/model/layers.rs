//! Building blocks of the toy decoder, each with a hand-written backward.

use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Result};
use crate::linalg::{gemm, MatRef, Matrix, SeededRng};
use crate::phm::{dense_apply, PhmOperator, ResidualBlock};

pub const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerNorm {
    pub gain: Vec<f64>,
    pub bias: Vec<f64>,
}

pub struct LnCache {
    xhat: Matrix,
    rstd: Vec<f64>,
}

impl LayerNorm {
    pub fn new(d: usize) -> Self {
        Self { gain: vec![1.0; d], bias: vec![0.0; d] }
    }

    pub fn forward(&self, x: &Matrix) -> (Matrix, LnCache) {
        let d = x.cols();
        let mut xhat = Matrix::zeros(x.rows(), d);
        let mut y = Matrix::zeros(x.rows(), d);
        let mut rstd = Vec::with_capacity(x.rows());
        for i in 0..x.rows() {
            let row = x.row(i);
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let r = 1.0 / (var + LN_EPS).sqrt();
            rstd.push(r);
            let xh = xhat.row_mut(i);
            for (o, &v) in xh.iter_mut().zip(row) {
                *o = (v - mean) * r;
            }
            let xh = xhat.row(i);
            for (j, o) in y.row_mut(i).iter_mut().enumerate() {
                *o = xh[j] * self.gain[j] + self.bias[j];
            }
        }
        (y, LnCache { xhat, rstd })
    }

    /// Returns `dx`; adds parameter gradients into `grads` when given.
    pub fn backward(&self, cache: &LnCache, dy: &Matrix, grads: Option<&mut LayerNorm>) -> Matrix {
        let d = dy.cols();
        if let Some(g) = grads {
            for i in 0..dy.rows() {
                for ((j, &gy), &xh) in dy.row(i).iter().enumerate().zip(cache.xhat.row(i)) {
                    g.gain[j] += gy * xh;
                    g.bias[j] += gy;
                }
            }
        }
        let mut dx = Matrix::zeros(dy.rows(), d);
        let mut dxhat = vec![0.0; d];
        for i in 0..dy.rows() {
            let xh = cache.xhat.row(i);
            for (j, v) in dxhat.iter_mut().enumerate() {
                *v = dy.get(i, j) * self.gain[j];
            }
            let mean = dxhat.iter().sum::<f64>() / d as f64;
            let mean_x = dxhat.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / d as f64;
            let r = cache.rstd[i];
            for (j, o) in dx.row_mut(i).iter_mut().enumerate() {
                *o = r * (dxhat[j] - mean - xh[j] * mean_x);
            }
        }
        dx
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/π)
const GELU_K: f64 = 0.044_715;

/// Tanh approximation of GELU.
pub fn gelu(u: f64) -> f64 {
    0.5 * u * (1.0 + (GELU_C * (u + GELU_K * u * u * u)).tanh())
}

pub fn gelu_grad(u: f64) -> f64 {
    let t = (GELU_C * (u + GELU_K * u * u * u)).tanh();
    0.5 * (1.0 + t) + 0.5 * u * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_K * u * u)
}

/// `ΔW = γ · up · down` on a frozen base projection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoraAdapter {
    /// `r × d_in`
    pub down: Matrix,
    /// `d_out × r`
    pub up: Matrix,
    pub scale: f64,
}

impl LoraAdapter {
    /// `down` is Gaussian, `up` starts at zero so the update is zero.
    pub fn init(rng: &mut SeededRng, d_in: usize, d_out: usize, rank: usize, scale: f64) -> Self {
        Self {
            down: rng.normal_matrix(rank, d_in, 1.0 / (d_in as f64).sqrt()),
            up: Matrix::zeros(d_out, rank),
            scale,
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self { down: Matrix::zeros(self.down.rows(), self.down.cols()), up: Matrix::zeros(self.up.rows(), self.up.cols()), scale: self.scale }
    }

    pub fn rank(&self) -> usize {
        self.down.rows()
    }

    pub fn delta(&self) -> Matrix {
        let mut d = Matrix::zeros(self.up.rows(), self.down.cols());
        gemm(self.scale, self.up.view(), self.down.view(), 0.0, d.view_mut());
        d
    }

    pub fn param_count(&self) -> usize {
        self.down.len() + self.up.len()
    }
}

/// `a·Wᵀ (+ γ·(a·downᵀ)·upᵀ)`; the second value is `a·downᵀ`.
pub fn project(a: &Matrix, w: &Matrix, lora: Option<&LoraAdapter>) -> Result<(Matrix, Option<Matrix>)> {
    let mut y = dense_apply(w, None, a)?;
    let mid = match lora {
        Some(l) => {
            let mut t = Matrix::zeros(a.rows(), l.rank());
            gemm(1.0, a.view(), l.down.view().t(), 0.0, t.view_mut());
            gemm(l.scale, t.view(), l.up.view().t(), 1.0, y.view_mut());
            Some(t)
        }
        None => None,
    };
    Ok((y, mid))
}

/// Backward of [`project`]. Adds `∂/∂a` into `da` and parameter gradients
/// into the optional buffers.
pub fn project_backward(
    a: &Matrix,
    w: &Matrix,
    lora: Option<(&LoraAdapter, &Matrix)>,
    dy: &Matrix,
    da: &mut Matrix,
    dw: Option<&mut Matrix>,
    dlora: Option<&mut LoraAdapter>,
) {
    gemm(1.0, dy.view(), w.view(), 1.0, da.view_mut());
    if let Some(dw) = dw {
        gemm(1.0, dy.view().t(), a.view(), 1.0, dw.view_mut());
    }
    if let Some((l, mid)) = lora {
        let mut dt = Matrix::zeros(dy.rows(), l.rank());
        gemm(l.scale, dy.view(), l.up.view(), 0.0, dt.view_mut());
        gemm(1.0, dt.view(), l.down.view(), 1.0, da.view_mut());
        if let Some(g) = dlora {
            gemm(l.scale, dy.view().t(), mid.view(), 1.0, g.up.view_mut());
            gemm(1.0, dt.view().t(), a.view(), 1.0, g.down.view_mut());
        }
    }
}

/// An FFN linear map: plain dense, dense+PHM blend, or PHM only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum FfnLinear {
    Dense { weight: Matrix, bias: Vec<f64> },
    Residual(ResidualBlock),
    Phm { op: PhmOperator, bias: Vec<f64> },
}

/// Separate path outputs (without bias) for the reconstruction loss.
pub struct Paths {
    pub phm: Matrix,
    pub dense: Matrix,
}

/// Which parameter gradients a backward pass has to produce.
#[derive(Debug, Clone, Copy)]
pub struct LinearGrads {
    pub weight: bool,
    pub bias: bool,
    pub cores: bool,
}

impl FfnLinear {
    pub fn d_in(&self) -> usize {
        match self {
            FfnLinear::Dense { weight, .. } => weight.cols(),
            FfnLinear::Residual(r) => r.dense.cols(),
            FfnLinear::Phm { op, .. } => op.d_in(),
        }
    }

    pub fn d_out(&self) -> usize {
        match self {
            FfnLinear::Dense { weight, .. } => weight.rows(),
            FfnLinear::Residual(r) => r.dense.rows(),
            FfnLinear::Phm { op, .. } => op.d_out(),
        }
    }

    pub fn basis_count(&self) -> Option<usize> {
        match self {
            FfnLinear::Dense { .. } => None,
            FfnLinear::Residual(r) => Some(r.phm.basis().count()),
            FfnLinear::Phm { op, .. } => Some(op.basis().count()),
        }
    }

    pub fn is_residual(&self) -> bool {
        matches!(self, FfnLinear::Residual(_))
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.for_each_slice_mut(&mut |_, s| s.fill(0.0));
        z
    }

    /// Visits `(role, values)`; roles are `weight`, `bias` and `core.{b}`.
    pub fn for_each_slice<'a>(&'a self, f: &mut dyn FnMut(String, &'a [f64])) {
        match self {
            FfnLinear::Dense { weight, bias } => {
                f("weight".into(), weight.data());
                f("bias".into(), bias);
            }
            FfnLinear::Residual(r) => {
                f("weight".into(), r.dense.data());
                f("bias".into(), &r.bias);
                for (b, c) in r.phm.cores().iter().enumerate() {
                    f(format!("core.{b}"), c.data());
                }
            }
            FfnLinear::Phm { op, bias } => {
                f("bias".into(), bias);
                for (b, c) in op.cores().iter().enumerate() {
                    f(format!("core.{b}"), c.data());
                }
            }
        }
    }

    pub fn for_each_slice_mut(&mut self, f: &mut dyn FnMut(String, &mut [f64])) {
        match self {
            FfnLinear::Dense { weight, bias } => {
                f("weight".into(), weight.data_mut());
                f("bias".into(), bias);
            }
            FfnLinear::Residual(r) => {
                f("weight".into(), r.dense.data_mut());
                f("bias".into(), &mut r.bias);
                for (b, c) in r.phm.cores_mut().iter_mut().enumerate() {
                    f(format!("core.{b}"), c.data_mut());
                }
            }
            FfnLinear::Phm { op, bias } => {
                f("bias".into(), bias);
                for (b, c) in op.cores_mut().iter_mut().enumerate() {
                    f(format!("core.{b}"), c.data_mut());
                }
            }
        }
    }

    /// Output at blend `alpha` and, when `capture` is set on a residual
    /// layer, both path outputs. Capturing never changes the output bits.
    pub fn forward(&self, x: &Matrix, alpha: f64, capture: bool) -> Result<(Matrix, Option<Paths>)> {
        match self {
            FfnLinear::Dense { weight, bias } => Ok((dense_apply(weight, Some(bias), x)?, None)),
            FfnLinear::Phm { op, bias } => {
                let mut y = op.apply(x)?;
                y.add_row_vector(bias);
                Ok((y, None))
            }
            FfnLinear::Residual(r) if !capture => Ok((r.apply_at(x, alpha)?, None)),
            FfnLinear::Residual(r) => {
                let phm = r.phm.apply(x)?;
                let dense = dense_apply(&r.dense, None, x)?;
                // Same operations, in the same order, as `ResidualBlock::apply_at`.
                let y = if alpha == 0.0 {
                    dense_apply(&r.dense, Some(&r.bias), x)?
                } else {
                    let mut y = phm.clone();
                    if alpha != 1.0 {
                        for (o, &d) in y.data_mut().iter_mut().zip(dense.data()) {
                            *o = (1.0 - alpha) * d + alpha * *o;
                        }
                    }
                    y.add_row_vector(&r.bias);
                    y
                };
                Ok((y, Some(Paths { phm, dense })))
            }
        }
    }

    /// Backward of [`forward`](Self::forward). `d_phm` is an extra gradient
    /// on the bare PHM path output (from the reconstruction loss); the
    /// matching dense-path term is its negation.
    pub fn backward(
        &self,
        x: &Matrix,
        dy: &Matrix,
        alpha: f64,
        d_phm: Option<&Matrix>,
        want: LinearGrads,
        grads: &mut FfnLinear,
    ) -> Result<Matrix> {
        if dy.cols() != self.d_out() || x.rows() != dy.rows() {
            return dim_err(format!("FFN backward: x {:?}, dy {:?}", x.shape(), dy.shape()));
        }
        match (self, grads) {
            (FfnLinear::Dense { weight, .. }, FfnLinear::Dense { weight: gw, bias: gb }) => {
                if want.weight {
                    gemm(1.0, dy.view().t(), x.view(), 1.0, gw.view_mut());
                }
                if want.bias {
                    add_column_sums(gb, dy);
                }
                let mut dx = Matrix::zeros(x.rows(), x.cols());
                gemm(1.0, dy.view(), weight.view(), 0.0, dx.view_mut());
                Ok(dx)
            }
            (FfnLinear::Phm { op, .. }, FfnLinear::Phm { op: gop, bias: gb }) => {
                if want.cores {
                    op.accumulate_core_grads(x, dy, 1.0, gop.cores_mut())?;
                }
                if want.bias {
                    add_column_sums(gb, dy);
                }
                op.input_grad(dy, 1.0)
            }
            (FfnLinear::Residual(r), FfnLinear::Residual(g)) => {
                if want.bias {
                    add_column_sums(&mut g.bias, dy);
                }
                // Upstream of the PHM path and of the dense path.
                let mut up_phm = if alpha == 0.0 { None } else { Some(dy.scaled(alpha)) };
                let mut up_dense = if alpha == 1.0 { None } else { Some(dy.scaled(1.0 - alpha)) };
                if let Some(dp) = d_phm {
                    match up_phm.as_mut() {
                        Some(u) => u.axpy(1.0, dp)?,
                        None => up_phm = Some(dp.clone()),
                    }
                    match up_dense.as_mut() {
                        Some(u) => u.axpy(-1.0, dp)?,
                        None => up_dense = Some(dp.scaled(-1.0)),
                    }
                }
                let mut dx = Matrix::zeros(x.rows(), x.cols());
                if let Some(ud) = &up_dense {
                    if want.weight {
                        gemm(1.0, ud.view().t(), x.view(), 1.0, g.dense.view_mut());
                    }
                    gemm(1.0, ud.view(), r.dense.view(), 0.0, dx.view_mut());
                }
                if let Some(up) = &up_phm {
                    if want.cores {
                        r.phm.accumulate_core_grads(x, up, 1.0, g.phm.cores_mut())?;
                    }
                    dx.axpy(1.0, &r.phm.input_grad(up, 1.0)?)?;
                }
                Ok(dx)
            }
            _ => dim_err("gradient buffer does not match layer kind"),
        }
    }
}

fn add_column_sums(into: &mut [f64], m: &Matrix) {
    for i in 0..m.rows() {
        for (g, &v) in into.iter_mut().zip(m.row(i)) {
            *g += v;
        }
    }
}

/// Multi-head causal self-attention with optional LoRA on q, k and v.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Attention {
    pub heads: usize,
    /// `q, k, v, o`, each `d × d` (`d_out × d_in`).
    pub w: [Matrix; 4],
    pub lora: [Option<LoraAdapter>; 3],
}

pub struct AttnCache {
    a: Matrix,
    qkv: [Matrix; 3],
    mids: [Option<Matrix>; 3],
    ctx: Matrix,
    /// Attention weights per (sequence, head), `len × len`.
    probs: Vec<Matrix>,
    seqs: usize,
    len: usize,
}

/// Which attention gradients to produce.
#[derive(Debug, Clone, Copy)]
pub struct AttnGrads {
    pub weights: bool,
    pub lora: bool,
}

impl Attention {
    pub fn init(rng: &mut SeededRng, d: usize, heads: usize) -> Self {
        let std = 1.0 / (d as f64).sqrt();
        let w = [(); 4].map(|_| rng.normal_matrix(d, d, std));
        Self { heads, w, lora: [None, None, None] }
    }

    pub fn zeros_like(&self) -> Self {
        let d = self.w[0].rows();
        Self {
            heads: self.heads,
            w: [(); 4].map(|_| Matrix::zeros(d, d)),
            lora: self.lora.clone().map(|l| l.map(|l| l.zeros_like())),
        }
    }

    /// `a` holds `seqs` sequences of `len` rows each.
    pub fn forward(&self, a: &Matrix, seqs: usize, len: usize) -> Result<(Matrix, AttnCache)> {
        let d = a.cols();
        let dh = d / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let proj = |i: usize| project(a, &self.w[i], self.lora[i].as_ref());
        let (q, mq) = proj(0)?;
        let (k, mk) = proj(1)?;
        let (v, mv) = proj(2)?;
        let mut ctx = Matrix::zeros(a.rows(), d);
        let mut probs = Vec::with_capacity(seqs * self.heads);
        for s in 0..seqs {
            for h in 0..self.heads {
                let block = |m| head_block(m, s, h, len, dh);
                let mut p = Matrix::zeros(len, len);
                gemm(scale, block(&q), block(&k).t(), 0.0, p.view_mut());
                causal_softmax(&mut p);
                gemm(1.0, p.view(), block(&v), 0.0, ctx.view_mut().row_block(s * len, len).col_block(h * dh, dh));
                probs.push(p);
            }
        }
        let out = dense_apply(&self.w[3], None, &ctx)?;
        let cache = AttnCache { a: a.clone(), qkv: [q, k, v], mids: [mq, mk, mv], ctx, probs, seqs, len };
        Ok((out, cache))
    }

    pub fn backward(&self, cache: &AttnCache, dout: &Matrix, want: AttnGrads, grads: &mut Attention) -> Matrix {
        let d = dout.cols();
        let dh = d / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let len = cache.len;
        if want.weights {
            gemm(1.0, dout.view().t(), cache.ctx.view(), 1.0, grads.w[3].view_mut());
        }
        let mut dctx = Matrix::zeros(dout.rows(), d);
        gemm(1.0, dout.view(), self.w[3].view(), 0.0, dctx.view_mut());

        let mut dqkv = [(); 3].map(|_| Matrix::zeros(dout.rows(), d));
        let [q, k, v] = &cache.qkv;
        let mut dp = Matrix::zeros(len, len);
        for s in 0..cache.seqs {
            for h in 0..self.heads {
                let p = &cache.probs[s * self.heads + h];
                let block = |m| head_block(m, s, h, len, dh);
                gemm(1.0, block(&dctx), block(v).t(), 0.0, dp.view_mut());
                let [dq, dk, dv] = &mut dqkv;
                gemm(1.0, p.view().t(), block(&dctx), 0.0, dv.view_mut().row_block(s * len, len).col_block(h * dh, dh));
                // softmax backward; masked entries have p = 0 and stay 0
                for i in 0..len {
                    let pr = p.row(i);
                    let dot: f64 = pr.iter().zip(dp.row(i)).map(|(a, b)| a * b).sum();
                    for (j, g) in dp.row_mut(i).iter_mut().enumerate() {
                        *g = scale * pr[j] * (*g - dot);
                    }
                }
                gemm(1.0, dp.view(), block(k), 0.0, dq.view_mut().row_block(s * len, len).col_block(h * dh, dh));
                gemm(1.0, dp.view().t(), block(q), 0.0, dk.view_mut().row_block(s * len, len).col_block(h * dh, dh));
            }
        }

        let mut da = Matrix::zeros(dout.rows(), d);
        let Attention { w: gw, lora: glora, .. } = grads;
        for (i, ((dy, gw), gl)) in dqkv.iter().zip(gw.iter_mut()).zip(glora.iter_mut()).enumerate() {
            let lora = self.lora[i].as_ref().zip(cache.mids[i].as_ref());
            project_backward(
                &cache.a,
                &self.w[i],
                lora,
                dy,
                &mut da,
                want.weights.then_some(gw),
                if want.lora { gl.as_mut() } else { None },
            );
        }
        da
    }
}

fn head_block(m: &Matrix, s: usize, h: usize, len: usize, dh: usize) -> MatRef<'_> {
    m.view().row_block(s * len, len).col_block(h * dh, dh)
}

/// Row-wise softmax over `j ≤ i`; entries above the diagonal become 0.
fn causal_softmax(p: &mut Matrix) {
    let n = p.cols();
    for i in 0..p.rows() {
        let row = p.row_mut(i);
        let max = row[..=i].iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let mut sum = 0.0;
        for v in row[..=i].iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row[..=i].iter_mut() {
            *v /= sum;
        }
        row[i + 1..n].fill(0.0);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fd(f: impl Fn(f64) -> f64, x: f64) -> f64 {
        let h = 1e-6;
        (f(x + h) - f(x - h)) / (2.0 * h)
    }

    #[test]
    fn gelu_values() {
        assert_eq!(gelu(0.0), 0.0);
        assert!((gelu(10.0) - 10.0).abs() < 1e-12);
        assert!(gelu(-10.0).abs() < 1e-12);
        for x in [-2.0, -0.3, 0.0, 0.7, 3.0] {
            assert!((gelu_grad(x) - fd(gelu, x)).abs() < 1e-8);
        }
    }

    #[test]
    fn layer_norm_output_is_standardized() {
        let x = SeededRng::new(1).normal_matrix(3, 8, 2.0);
        let (y, _) = LayerNorm::new(8).forward(&x);
        for i in 0..3 {
            let mean: f64 = y.row(i).iter().sum::<f64>() / 8.0;
            let var: f64 = y.row(i).iter().map(|v| v * v).sum::<f64>() / 8.0;
            assert!(mean.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-4);
        }
    }

    #[test]
    fn layer_norm_backward_matches_fd() {
        let mut rng = SeededRng::new(2);
        let x = rng.normal_matrix(2, 5, 1.0);
        let up = rng.normal_matrix(2, 5, 1.0);
        let mut ln = LayerNorm::new(5);
        ln.gain = (0..5).map(|_| rng.normal()).collect();
        let loss = |x: &Matrix| -> f64 {
            let (y, _) = ln.forward(x);
            y.data().iter().zip(up.data()).map(|(a, b)| a * b).sum()
        };
        let (_, cache) = ln.forward(&x);
        let dx = ln.backward(&cache, &up, None);
        for k in 0..x.len() {
            let num = fd(
                |t| {
                    let mut xp = x.clone();
                    xp.data_mut()[k] = t;
                    loss(&xp)
                },
                x.data()[k],
            );
            assert!((dx.data()[k] - num).abs() < 1e-7);
        }
    }

    #[test]
    fn causal_softmax_masks_future() {
        let mut p = Matrix::from_fn(3, 3, |i, j| (i + j) as f64);
        causal_softmax(&mut p);
        assert_eq!(p.get(0, 0), 1.0);
        assert_eq!(p.get(0, 1), 0.0);
        assert_eq!(p.get(1, 2), 0.0);
        for i in 0..3 {
            assert!((p.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn lora_delta_matches_projection() {
        let mut rng = SeededRng::new(3);
        let w = rng.normal_matrix(4, 6, 1.0);
        let mut l = LoraAdapter::init(&mut rng, 6, 4, 2, 0.5);
        l.up = rng.normal_matrix(4, 2, 1.0);
        let a = rng.normal_matrix(3, 6, 1.0);
        let (y, _) = project(&a, &w, Some(&l)).unwrap();
        let merged = w.add(&l.delta()).unwrap();
        let want = dense_apply(&merged, None, &a).unwrap();
        assert!(y.max_abs_diff(&want) < 1e-12);
    }

    #[test]
    fn fresh_lora_is_a_no_op() {
        let mut rng = SeededRng::new(4);
        let w = rng.normal_matrix(4, 4, 1.0);
        let l = LoraAdapter::init(&mut rng, 4, 4, 2, 1.0);
        let a = rng.normal_matrix(3, 4, 1.0);
        assert_eq!(project(&a, &w, Some(&l)).unwrap().0, project(&a, &w, None).unwrap().0);
    }
}
