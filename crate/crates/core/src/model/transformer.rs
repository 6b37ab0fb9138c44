use serde::{Deserialize, Serialize};

use crate::allocator::{AllocationPlan, ExtraParams, LayerDescriptor, LayerKind, ModelManifest};
use crate::error::{dim_err, PhmError, Result};
use crate::linalg::{gemm, Matrix, SeededRng};
use crate::phm::{BasisSet, PhmOperator, ResidualBlock};
use crate::projection::project;

use super::config::ToyModelConfig;
use super::layers::{
    gelu, gelu_grad, AttnCache, AttnGrads, Attention, FfnLinear, LayerNorm, LinearGrads, LnCache, LoraAdapter, Paths,
};
use super::task::Batch;

/// Parameter groups used for freezing and for gradient checks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamClass {
    TokEmb,
    PosEmb,
    Attn,
    LoraDown,
    LoraUp,
    Norm,
    FfnWeight,
    FfnBias,
    Core,
    Head,
}

impl ParamClass {
    pub const ALL: [ParamClass; 10] = [
        ParamClass::TokEmb,
        ParamClass::PosEmb,
        ParamClass::Attn,
        ParamClass::LoraDown,
        ParamClass::LoraUp,
        ParamClass::Norm,
        ParamClass::FfnWeight,
        ParamClass::FfnBias,
        ParamClass::Core,
        ParamClass::Head,
    ];
}

/// Set of trainable parameter classes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Trainable(u16);

impl Trainable {
    pub fn none() -> Self {
        Self(0)
    }

    pub fn all() -> Self {
        Self::of(&ParamClass::ALL)
    }

    pub fn of(classes: &[ParamClass]) -> Self {
        Self(classes.iter().fold(0, |acc, &c| acc | 1 << c as u16))
    }

    pub fn with(self, c: ParamClass) -> Self {
        Self(self.0 | 1 << c as u16)
    }

    pub fn contains(self, c: ParamClass) -> bool {
        self.0 >> c as u16 & 1 == 1
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Block {
    pub ln1: LayerNorm,
    pub attn: Attention,
    pub ln2: LayerNorm,
    pub ffn_up: FfnLinear,
    pub ffn_down: FfnLinear,
}

/// Pre-LN decoder-only transformer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyModel {
    pub config: ToyModelConfig,
    /// `V × d`
    pub tok_emb: Matrix,
    /// `max_seq × d`
    pub pos_emb: Matrix,
    pub blocks: Vec<Block>,
    pub ln_f: LayerNorm,
    /// `V × d`; `None` when tied to `tok_emb`.
    pub head: Option<Matrix>,
}

/// Kind of each FFN linear plus adapter presence; enough to rebuild the
/// parameter layout.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Layout {
    pub ffn: Vec<FfnKind>,
    pub lora: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum FfnKind {
    Dense,
    Residual { b: usize },
    Phm { b: usize },
}

/// Everything the backward pass and the reconstruction loss need.
pub struct ForwardCache {
    seqs: usize,
    len: usize,
    tokens: Vec<usize>,
    blocks: Vec<BlockCache>,
    ln_f: LnCache,
    hf: Matrix,
}

struct BlockCache {
    ln1: LnCache,
    attn: AttnCache,
    ln2: LnCache,
    c: Matrix,
    u: Matrix,
    g: Matrix,
    up_paths: Option<Paths>,
    down_paths: Option<Paths>,
}

/// Inputs and path outputs of one residual FFN linear.
pub struct CapturedLayer<'a> {
    pub layer: usize,
    pub input: &'a Matrix,
    pub paths: &'a Paths,
}

impl ForwardCache {
    /// Captured residual layers in id order.
    pub fn captured(&self) -> Vec<CapturedLayer<'_>> {
        let mut out = Vec::new();
        for (i, b) in self.blocks.iter().enumerate() {
            if let Some(p) = &b.up_paths {
                out.push(CapturedLayer { layer: 2 * i, input: &b.c, paths: p });
            }
            if let Some(p) = &b.down_paths {
                out.push(CapturedLayer { layer: 2 * i + 1, input: &b.g, paths: p });
            }
        }
        out
    }
}

/// Id of the `which`-th FFN linear (0 = up, 1 = down) of `block`.
pub fn ffn_layer_id(block: usize, which: usize) -> usize {
    2 * block + which
}

impl ToyModel {
    /// Dense model initialized from `config.seed`.
    pub fn dense(config: &ToyModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = SeededRng::new(config.seed).fork(0x6d6f_6465);
        let (d, f) = (config.d_model, config.d_ff);
        let tok_emb = rng.normal_matrix(config.vocab, d, 0.5);
        let pos_emb = rng.normal_matrix(config.max_seq, d, 0.5);
        let blocks = (0..config.layers)
            .map(|_| Block {
                ln1: LayerNorm::new(d),
                attn: Attention::init(&mut rng, d, config.heads),
                ln2: LayerNorm::new(d),
                ffn_up: FfnLinear::Dense { weight: rng.normal_matrix(f, d, 1.0 / (d as f64).sqrt()), bias: vec![0.0; f] },
                ffn_down: FfnLinear::Dense {
                    weight: rng.normal_matrix(d, f, 1.0 / (f as f64).sqrt()),
                    bias: vec![0.0; d],
                },
            })
            .collect();
        let head = (!config.tie_embeddings).then(|| rng.normal_matrix(config.vocab, d, 1.0 / (d as f64).sqrt()));
        Ok(Self { config: config.clone(), tok_emb, pos_emb, blocks, ln_f: LayerNorm::new(d), head })
    }

    /// Zero-valued model with the given layout.
    pub fn skeleton(config: &ToyModelConfig, layout: &Layout) -> Result<Self> {
        let mut m = Self::dense(config)?;
        if layout.ffn.len() != 2 * config.layers {
            return Err(PhmError::Config(format!(
                "layout lists {} FFN linears, model has {}",
                layout.ffn.len(),
                2 * config.layers
            )));
        }
        for (i, kind) in layout.ffn.iter().enumerate() {
            let lin = m.ffn_mut(i);
            let (d_in, d_out) = (lin.d_in(), lin.d_out());
            *lin = match *kind {
                FfnKind::Dense => FfnLinear::Dense { weight: Matrix::zeros(d_out, d_in), bias: vec![0.0; d_out] },
                FfnKind::Residual { b } => FfnLinear::Residual(ResidualBlock::new(
                    Matrix::zeros(d_out, d_in),
                    PhmOperator::zeros(BasisSet::new(b)?, d_out / 2, d_in / 2)?,
                    0.0,
                    vec![0.0; d_out],
                )?),
                FfnKind::Phm { b } => FfnLinear::Phm {
                    op: PhmOperator::zeros(BasisSet::new(b)?, d_out / 2, d_in / 2)?,
                    bias: vec![0.0; d_out],
                },
            };
        }
        if layout.lora {
            let mut rng = SeededRng::new(0);
            let (d, r, g) = (config.d_model, config.lora_rank, config.lora_scale);
            for b in &mut m.blocks {
                b.attn.lora = [(); 3].map(|_| Some(LoraAdapter::init(&mut rng, d, d, r, g)));
            }
        }
        m.for_each_param_mut(&mut |_, _, s| s.fill(0.0));
        Ok(m)
    }

    pub fn layout(&self) -> Layout {
        let ffn = (0..2 * self.blocks.len())
            .map(|i| match self.ffn(i) {
                FfnLinear::Dense { .. } => FfnKind::Dense,
                FfnLinear::Residual(r) => FfnKind::Residual { b: r.phm.basis().count() },
                FfnLinear::Phm { op, .. } => FfnKind::Phm { b: op.basis().count() },
            })
            .collect();
        let lora = self.blocks.iter().any(|b| b.attn.lora.iter().any(Option::is_some));
        Layout { ffn, lora }
    }

    pub fn ffn(&self, id: usize) -> &FfnLinear {
        let b = &self.blocks[id / 2];
        if id % 2 == 0 {
            &b.ffn_up
        } else {
            &b.ffn_down
        }
    }

    pub fn ffn_mut(&mut self, id: usize) -> &mut FfnLinear {
        let b = &mut self.blocks[id / 2];
        if id % 2 == 0 {
            &mut b.ffn_up
        } else {
            &mut b.ffn_down
        }
    }

    pub fn has_residual(&self) -> bool {
        (0..2 * self.blocks.len()).any(|i| self.ffn(i).is_residual())
    }

    /// Every linear map with its allocator descriptor. FFN linears use ids
    /// `2·block + {0, 1}`; the rest follow.
    pub fn descriptors(&self) -> ModelManifest {
        let c = &self.config;
        let d = c.d_model;
        let mut layers = Vec::new();
        for i in 0..c.layers {
            for (which, (d_in, d_out)) in [(d, c.d_ff), (c.d_ff, d)].into_iter().enumerate() {
                layers.push(LayerDescriptor {
                    index: ffn_layer_id(i, which),
                    depth: i,
                    kind: LayerKind::Ffn,
                    d_in,
                    d_out,
                    is_language_mlp: true,
                });
            }
        }
        let mut next = 2 * c.layers;
        let mut push = |depth, kind, d_in, d_out| {
            layers.push(LayerDescriptor { index: next, depth, kind, d_in, d_out, is_language_mlp: false });
            next += 1;
        };
        for i in 0..c.layers {
            for _ in 0..4 {
                push(i, LayerKind::Attention, d, d);
            }
        }
        push(0, LayerKind::Embedding, c.vocab, d);
        push(0, LayerKind::Embedding, c.max_seq, d);
        if !c.tie_embeddings {
            push(c.layers, LayerKind::Head, d, c.vocab);
        }
        ModelManifest { l_lang: c.layers, layers }
    }

    /// Parameters outside the linear maps listed by [`descriptors`](Self::descriptors).
    pub fn extra_params(&self) -> ExtraParams {
        let mut extra = ExtraParams::default();
        self.for_each_param(&mut |_, class, s| match class {
            ParamClass::LoraDown | ParamClass::LoraUp => extra.lora += s.len(),
            ParamClass::Norm | ParamClass::FfnBias => extra.other += s.len(),
            _ => {}
        });
        extra
    }

    /// Visits every parameter as `(name, class, values)` in a fixed order.
    pub fn for_each_param<'a>(&'a self, f: &mut dyn FnMut(&str, ParamClass, &'a [f64])) {
        f("tok_emb", ParamClass::TokEmb, self.tok_emb.data());
        f("pos_emb", ParamClass::PosEmb, self.pos_emb.data());
        for (i, b) in self.blocks.iter().enumerate() {
            f(&format!("blocks.{i}.ln1.gain"), ParamClass::Norm, &b.ln1.gain);
            f(&format!("blocks.{i}.ln1.bias"), ParamClass::Norm, &b.ln1.bias);
            for (j, name) in ["q", "k", "v", "o"].iter().enumerate() {
                f(&format!("blocks.{i}.attn.w{name}"), ParamClass::Attn, b.attn.w[j].data());
            }
            for (j, name) in ["q", "k", "v"].iter().enumerate() {
                if let Some(l) = &b.attn.lora[j] {
                    f(&format!("blocks.{i}.attn.lora_{name}.down"), ParamClass::LoraDown, l.down.data());
                    f(&format!("blocks.{i}.attn.lora_{name}.up"), ParamClass::LoraUp, l.up.data());
                }
            }
            f(&format!("blocks.{i}.ln2.gain"), ParamClass::Norm, &b.ln2.gain);
            f(&format!("blocks.{i}.ln2.bias"), ParamClass::Norm, &b.ln2.bias);
            for (which, lin) in [("ffn_up", &b.ffn_up), ("ffn_down", &b.ffn_down)] {
                lin.for_each_slice(&mut |role, s| {
                    f(&format!("blocks.{i}.{which}.{role}"), ffn_class(&role), s);
                });
            }
        }
        f("ln_f.gain", ParamClass::Norm, &self.ln_f.gain);
        f("ln_f.bias", ParamClass::Norm, &self.ln_f.bias);
        if let Some(h) = &self.head {
            f("head", ParamClass::Head, h.data());
        }
    }

    /// Mutable twin of [`for_each_param`](Self::for_each_param); same order.
    pub fn for_each_param_mut(&mut self, f: &mut dyn FnMut(&str, ParamClass, &mut [f64])) {
        f("tok_emb", ParamClass::TokEmb, self.tok_emb.data_mut());
        f("pos_emb", ParamClass::PosEmb, self.pos_emb.data_mut());
        for (i, b) in self.blocks.iter_mut().enumerate() {
            f(&format!("blocks.{i}.ln1.gain"), ParamClass::Norm, &mut b.ln1.gain);
            f(&format!("blocks.{i}.ln1.bias"), ParamClass::Norm, &mut b.ln1.bias);
            for (j, name) in ["q", "k", "v", "o"].iter().enumerate() {
                f(&format!("blocks.{i}.attn.w{name}"), ParamClass::Attn, b.attn.w[j].data_mut());
            }
            for (j, name) in ["q", "k", "v"].iter().enumerate() {
                if let Some(l) = &mut b.attn.lora[j] {
                    f(&format!("blocks.{i}.attn.lora_{name}.down"), ParamClass::LoraDown, l.down.data_mut());
                    f(&format!("blocks.{i}.attn.lora_{name}.up"), ParamClass::LoraUp, l.up.data_mut());
                }
            }
            f(&format!("blocks.{i}.ln2.gain"), ParamClass::Norm, &mut b.ln2.gain);
            f(&format!("blocks.{i}.ln2.bias"), ParamClass::Norm, &mut b.ln2.bias);
            for (which, lin) in [("ffn_up", &mut b.ffn_up), ("ffn_down", &mut b.ffn_down)] {
                lin.for_each_slice_mut(&mut |role, s| {
                    f(&format!("blocks.{i}.{which}.{role}"), ffn_class(&role), s);
                });
            }
        }
        f("ln_f.gain", ParamClass::Norm, &mut self.ln_f.gain);
        f("ln_f.bias", ParamClass::Norm, &mut self.ln_f.bias);
        if let Some(h) = &mut self.head {
            f("head", ParamClass::Head, h.data_mut());
        }
    }

    /// Total number of stored scalars.
    pub fn param_count(&self) -> usize {
        let mut n = 0;
        self.for_each_param(&mut |_, _, s| n += s.len());
        n
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.for_each_param_mut(&mut |_, _, s| s.fill(0.0));
        z
    }

    /// Wraps the planned FFN linears into residual blocks at α = 0, with
    /// cores from the Frobenius projection, and attaches LoRA to q, k, v.
    pub fn swap(mut self, plan: &AllocationPlan) -> Result<Self> {
        let manifest = self.descriptors();
        plan.validate(&manifest.layers)?;
        for (&id, &b) in &plan.assignments {
            let lin = self.ffn_mut(id);
            let FfnLinear::Dense { weight, bias } = lin else {
                return Err(PhmError::Config(format!("layer {id} is already swapped")));
            };
            let basis = BasisSet::new(b)?;
            let op = project(weight, basis)?.into_operator(basis)?;
            *lin = FfnLinear::Residual(ResidualBlock::new(weight.clone(), op, 0.0, bias.clone())?);
        }
        let c = &self.config;
        let mut rng = SeededRng::new(c.seed).fork(0x6c6f_7261);
        let (d, r, g) = (c.d_model, c.lora_rank, c.lora_scale);
        for b in &mut self.blocks {
            for slot in &mut b.attn.lora {
                if slot.is_none() {
                    *slot = Some(LoraAdapter::init(&mut rng, d, d, r, g));
                }
            }
        }
        Ok(self)
    }

    /// Replaces every residual block by its PHM path and bias.
    pub fn collapse(mut self) -> Self {
        for i in 0..2 * self.blocks.len() {
            let lin = self.ffn_mut(i);
            if let FfnLinear::Residual(r) = lin {
                *lin = FfnLinear::Phm { op: r.phm.clone(), bias: r.bias.clone() };
            }
        }
        self
    }

    /// Folds `γ·up·down` into the base projections and drops the adapters.
    pub fn lora_merge(mut self) -> Result<Self> {
        for b in &mut self.blocks {
            for (w, slot) in b.attn.w.iter_mut().zip(b.attn.lora.iter_mut()) {
                if let Some(l) = slot.take() {
                    w.axpy(1.0, &l.delta())?;
                }
            }
        }
        Ok(self)
    }

    fn check_batch(&self, batch: &Batch) -> Result<()> {
        if batch.len > self.config.max_seq {
            return dim_err(format!("sequence length {} exceeds max_seq {}", batch.len, self.config.max_seq));
        }
        if let Some(&t) = batch.tokens.iter().find(|&&t| t >= self.config.vocab) {
            return dim_err(format!("token {t} outside vocabulary of {}", self.config.vocab));
        }
        Ok(())
    }

    fn head_weight(&self) -> &Matrix {
        self.head.as_ref().unwrap_or(&self.tok_emb)
    }

    /// Logits (`tokens × V`) at blend `alpha`.
    pub fn forward(&self, batch: &Batch, alpha: f64) -> Result<Matrix> {
        Ok(self.forward_impl(batch, alpha, false, false)?.0)
    }

    /// Teacher pass: every residual block at α = 0.
    pub fn teacher_forward(&self, batch: &Batch) -> Result<Matrix> {
        self.forward(batch, 0.0)
    }

    /// Forward that keeps the activations for [`backward`](Self::backward);
    /// `capture` also records both path outputs of every residual layer.
    pub fn forward_cached(&self, batch: &Batch, alpha: f64, capture: bool) -> Result<(Matrix, ForwardCache)> {
        let (logits, cache) = self.forward_impl(batch, alpha, true, capture)?;
        Ok((logits, cache.expect("cache requested")))
    }

    fn forward_impl(
        &self,
        batch: &Batch,
        alpha: f64,
        keep: bool,
        capture: bool,
    ) -> Result<(Matrix, Option<ForwardCache>)> {
        self.check_batch(batch)?;
        let d = self.config.d_model;
        let n = batch.tokens.len();
        let mut h = Matrix::zeros(n, d);
        for (r, &t) in batch.tokens.iter().enumerate() {
            let pos = r % batch.len;
            for (j, o) in h.row_mut(r).iter_mut().enumerate() {
                *o = self.tok_emb.get(t, j) + self.pos_emb.get(pos, j);
            }
        }
        let mut caches = Vec::with_capacity(if keep { self.blocks.len() } else { 0 });
        for b in &self.blocks {
            let (a, ln1) = b.ln1.forward(&h);
            let (att, attn) = b.attn.forward(&a, batch.seqs, batch.len)?;
            h.axpy(1.0, &att)?;
            let (c, ln2) = b.ln2.forward(&h);
            let (u, up_paths) = b.ffn_up.forward(&c, alpha, capture)?;
            let g = u.map(gelu);
            let (f, down_paths) = b.ffn_down.forward(&g, alpha, capture)?;
            h.axpy(1.0, &f)?;
            if keep {
                caches.push(BlockCache { ln1, attn, ln2, c, u, g, up_paths, down_paths });
            }
        }
        let (hf, ln_f) = self.ln_f.forward(&h);
        let mut logits = Matrix::zeros(n, self.config.vocab);
        gemm(1.0, hf.view(), self.head_weight().view().t(), 0.0, logits.view_mut());
        let cache = keep.then(|| ForwardCache {
            seqs: batch.seqs,
            len: batch.len,
            tokens: batch.tokens.clone(),
            blocks: caches,
            ln_f,
            hf,
        });
        Ok((logits, cache))
    }

    /// Accumulates gradients into `grads` (a [`zeros_like`](Self::zeros_like)
    /// buffer) for the parameter classes in `want`.
    ///
    /// `dlogits` is the loss gradient w.r.t. the logits. `d_phm` holds
    /// `(layer id, gradient on the bare PHM output)` pairs from the
    /// reconstruction term.
    pub fn backward(
        &self,
        cache: &ForwardCache,
        dlogits: &Matrix,
        d_phm: &[(usize, Matrix)],
        alpha: f64,
        want: Trainable,
        grads: &mut ToyModel,
    ) -> Result<()> {
        let n = cache.tokens.len();
        if dlogits.shape() != (n, self.config.vocab) {
            return dim_err(format!("dlogits {:?} for {n} tokens", dlogits.shape()));
        }
        let tied = self.head.is_none();
        let head_trainable = want.contains(ParamClass::Head) || (tied && want.contains(ParamClass::TokEmb));
        if head_trainable {
            let g = match &mut grads.head {
                Some(h) => h,
                None => &mut grads.tok_emb,
            };
            gemm(1.0, dlogits.view().t(), cache.hf.view(), 1.0, g.view_mut());
        }
        let mut dhf = Matrix::zeros(n, self.config.d_model);
        gemm(1.0, dlogits.view(), self.head_weight().view(), 0.0, dhf.view_mut());
        let norm = want.contains(ParamClass::Norm);
        let mut dh = self.ln_f.backward(&cache.ln_f, &dhf, norm.then_some(&mut grads.ln_f));

        let lin = LinearGrads {
            weight: want.contains(ParamClass::FfnWeight),
            bias: want.contains(ParamClass::FfnBias),
            cores: want.contains(ParamClass::Core),
        };
        let attn_want = AttnGrads {
            weights: want.contains(ParamClass::Attn),
            lora: want.contains(ParamClass::LoraDown) || want.contains(ParamClass::LoraUp),
        };
        let find = |id: usize| d_phm.iter().find(|(l, _)| *l == id).map(|(_, m)| m);
        for (i, (b, bc)) in self.blocks.iter().zip(&cache.blocks).enumerate().rev() {
            let gb = &mut grads.blocks[i];
            let dg = b.ffn_down.backward(&bc.g, &dh, alpha, find(ffn_layer_id(i, 1)), lin, &mut gb.ffn_down)?;
            let du = dg.zip_with(&bc.u, |g, u| g * gelu_grad(u))?;
            let dc = b.ffn_up.backward(&bc.c, &du, alpha, find(ffn_layer_id(i, 0)), lin, &mut gb.ffn_up)?;
            dh.axpy(1.0, &b.ln2.backward(&bc.ln2, &dc, norm.then_some(&mut gb.ln2)))?;
            let da = b.attn.backward(&bc.attn, &dh, attn_want, &mut gb.attn);
            dh.axpy(1.0, &b.ln1.backward(&bc.ln1, &da, norm.then_some(&mut gb.ln1)))?;
        }
        if want.contains(ParamClass::TokEmb) {
            for (r, &t) in cache.tokens.iter().enumerate() {
                for (g, &v) in grads.tok_emb.row_mut(t).iter_mut().zip(dh.row(r)) {
                    *g += v;
                }
            }
        }
        if want.contains(ParamClass::PosEmb) {
            for r in 0..n {
                let pos = r % cache.len;
                for (g, &v) in grads.pos_emb.row_mut(pos).iter_mut().zip(dh.row(r)) {
                    *g += v;
                }
            }
        }
        debug_assert_eq!(cache.seqs * cache.len, n);
        Ok(())
    }
}

fn ffn_class(role: &str) -> ParamClass {
    match role {
        "weight" => ParamClass::FfnWeight,
        "bias" => ParamClass::FfnBias,
        _ => ParamClass::Core,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::allocator::{heuristic_plan, accounting};
    use crate::loss::softmax;
    use crate::model::task::Batch;

    fn random_batch(rng: &mut SeededRng, c: &ToyModelConfig, seqs: usize, len: usize) -> Batch {
        let tokens = (0..seqs * len).map(|_| rng.below(c.vocab)).collect();
        Batch::unlabeled(seqs, len, tokens).unwrap()
    }

    fn micro_plan(m: &ToyModel, k: usize) -> AllocationPlan {
        heuristic_plan(&m.descriptors(), 0, k).unwrap()
    }

    #[test]
    fn empty_plan_is_dense_baseline() {
        let c = ToyModelConfig::micro();
        let dense = ToyModel::dense(&c).unwrap();
        let swapped = dense.clone().swap(&AllocationPlan::empty(c.layers)).unwrap();
        let batch = random_batch(&mut SeededRng::new(1), &c, 2, 5);
        let a = dense.forward(&batch, 0.0).unwrap();
        let b = swapped.forward(&batch, 0.7).unwrap();
        assert!(a.max_abs_diff(&b) < 1e-12);
    }

    #[test]
    fn alpha_zero_is_bitwise_dense() {
        let c = ToyModelConfig::micro();
        let dense = ToyModel::dense(&c).unwrap();
        let swapped = dense.clone().swap(&micro_plan(&dense, 1)).unwrap();
        let mut rng = SeededRng::new(2);
        for _ in 0..4 {
            let batch = random_batch(&mut rng, &c, 3, 6);
            assert_eq!(dense.forward(&batch, 0.0).unwrap(), swapped.forward(&batch, 0.0).unwrap());
        }
    }

    #[test]
    fn in_subspace_weights_survive_full_swap() {
        let c = ToyModelConfig::micro();
        let mut dense = ToyModel::dense(&c).unwrap();
        // Replace every FFN weight by its B = 2 projection so it lies in the subspace.
        for i in 0..2 * c.layers {
            if let FfnLinear::Dense { weight, .. } = dense.ffn_mut(i) {
                let basis = BasisSet::new(2).unwrap();
                *weight = project(weight, basis).unwrap().into_operator(basis).unwrap().expand();
            }
        }
        let swapped = dense.clone().swap(&micro_plan(&dense, 0)).unwrap();
        let batch = random_batch(&mut SeededRng::new(3), &c, 2, 7);
        let a = dense.forward(&batch, 0.0).unwrap();
        let b = swapped.forward(&batch, 1.0).unwrap();
        assert!(a.max_abs_diff(&b) < 1e-9);
    }

    #[test]
    fn capture_does_not_perturb() {
        let c = ToyModelConfig::micro();
        let m = ToyModel::dense(&c).unwrap();
        let m = m.clone().swap(&micro_plan(&m, 1)).unwrap();
        let batch = random_batch(&mut SeededRng::new(4), &c, 2, 6);
        for alpha in [0.0, 0.3, 1.0] {
            let plain = m.forward(&batch, alpha).unwrap();
            let (cached, cache) = m.forward_cached(&batch, alpha, true).unwrap();
            assert_eq!(plain, cached);
            assert_eq!(cache.captured().len(), 2 * c.layers);
        }
    }

    #[test]
    fn softmax_rows_normalize() {
        let c = ToyModelConfig::micro();
        let m = ToyModel::dense(&c).unwrap();
        let m = m.clone().swap(&micro_plan(&m, 1)).unwrap();
        let batch = random_batch(&mut SeededRng::new(5), &c, 2, 8);
        let logits = m.forward(&batch, 0.5).unwrap();
        assert!(logits.is_finite());
        let p = softmax(&logits, 1.0);
        for i in 0..p.rows() {
            assert!((p.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn sequence_and_token_limits() {
        let c = ToyModelConfig::micro();
        let m = ToyModel::dense(&c).unwrap();
        let too_long = Batch::unlabeled(1, c.max_seq + 1, vec![0; c.max_seq + 1]).unwrap();
        assert!(m.forward(&too_long, 0.0).is_err());
        let bad_token = Batch::unlabeled(1, 2, vec![0, c.vocab]).unwrap();
        assert!(m.forward(&bad_token, 0.0).is_err());
    }

    #[test]
    fn causal_prefix_invariance() {
        let c = ToyModelConfig::micro();
        let m = ToyModel::dense(&c).unwrap();
        let full = Batch::unlabeled(1, 6, vec![1, 2, 3, 4, 5, 6]).unwrap();
        let prefix = Batch::unlabeled(1, 4, vec![1, 2, 3, 4]).unwrap();
        let a = m.forward(&full, 0.0).unwrap();
        let b = m.forward(&prefix, 0.0).unwrap();
        for i in 0..4 {
            for j in 0..c.vocab {
                assert!((a.get(i, j) - b.get(i, j)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn collapse_matches_alpha_one_and_accounting() {
        let c = ToyModelConfig::micro();
        let m = ToyModel::dense(&c).unwrap();
        assert_eq!(m.param_count(), accounting(&AllocationPlan::empty(c.layers), &m.descriptors().layers, m.extra_params()).params_before);
        let plan = micro_plan(&m, 1);
        let swapped = m.swap(&plan).unwrap();
        let collapsed = swapped.clone().collapse();
        let batch = random_batch(&mut SeededRng::new(6), &c, 2, 5);
        let a = swapped.forward(&batch, 1.0).unwrap();
        let b = collapsed.forward(&batch, 0.3).unwrap();
        assert!(a.max_abs_diff(&b) < 1e-12);
        let acc = accounting(&plan, &collapsed.descriptors().layers, collapsed.extra_params());
        assert_eq!(collapsed.param_count(), acc.params_after);
        assert_eq!(collapsed.clone().collapse(), collapsed);
    }

    #[test]
    fn lora_merge_preserves_outputs() {
        let c = ToyModelConfig::micro();
        let m = ToyModel::dense(&c).unwrap();
        let mut m = m.clone().swap(&micro_plan(&m, 1)).unwrap();
        let mut rng = SeededRng::new(7);
        for b in &mut m.blocks {
            for l in b.attn.lora.iter_mut().flatten() {
                l.up = rng.normal_matrix(l.up.rows(), l.up.cols(), 0.3);
            }
        }
        let batch = random_batch(&mut rng, &c, 2, 6);
        let before = m.forward(&batch, 0.4).unwrap();
        let merged = m.lora_merge().unwrap();
        assert!(merged.forward(&batch, 0.4).unwrap().max_abs_diff(&before) < 1e-10);
        let mut lora_params = 0;
        merged.for_each_param(&mut |_, class, _| {
            if matches!(class, ParamClass::LoraDown | ParamClass::LoraUp) {
                lora_params += 1;
            }
        });
        assert_eq!(lora_params, 0);
        assert!(!merged.layout().lora);
    }

    #[test]
    fn skeleton_matches_layout_and_names() {
        let c = ToyModelConfig::micro();
        let m = ToyModel::dense(&c).unwrap();
        let m = m.clone().swap(&micro_plan(&m, 1)).unwrap();
        let sk = ToyModel::skeleton(&c, &m.layout()).unwrap();
        let mut a = Vec::new();
        m.for_each_param(&mut |n, cl, s| a.push((n.to_string(), cl, s.len())));
        let mut b = Vec::new();
        sk.for_each_param(&mut |n, cl, s| b.push((n.to_string(), cl, s.len())));
        assert_eq!(a, b);
        let mut mut_names = Vec::new();
        let mut z = m.clone();
        z.for_each_param_mut(&mut |n, cl, s| mut_names.push((n.to_string(), cl, s.len())));
        assert_eq!(a, mut_names);
    }

    #[test]
    fn trainable_sets() {
        let t = Trainable::of(&[ParamClass::Core, ParamClass::Head]);
        assert!(t.contains(ParamClass::Core));
        assert!(!t.contains(ParamClass::TokEmb));
        assert!(t.with(ParamClass::TokEmb).contains(ParamClass::TokEmb));
        assert!(ParamClass::ALL.iter().all(|&c| Trainable::all().contains(c)));
        assert!(ParamClass::ALL.iter().all(|&c| !Trainable::none().contains(c)));
    }
}
