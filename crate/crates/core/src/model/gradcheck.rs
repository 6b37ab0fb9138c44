//! Central-difference check of the full training objective.

use crate::error::Result;
use crate::linalg::{Matrix, SeededRng};

use super::task::Batch;
use super::train::{objective, ObjectiveSpec};
use super::transformer::{ParamClass, ToyModel, Trainable};

/// Relative step: `h = STEP · max(1, |θ|)`.
pub const STEP: f64 = 1e-6;
/// Denominator floor of the relative error, so near-zero gradients are
/// compared in absolute terms.
pub const REL_FLOOR: f64 = 1e-6;

/// Coordinate groups reported separately.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum GradGroup {
    Cores,
    Lora,
    Embeddings,
    /// Output head and the final norm in front of it.
    Head,
    Attention,
    Norms,
    FfnDense,
}

impl GradGroup {
    fn of(name: &str, class: ParamClass) -> Self {
        match class {
            ParamClass::Core => GradGroup::Cores,
            ParamClass::LoraDown | ParamClass::LoraUp => GradGroup::Lora,
            ParamClass::TokEmb | ParamClass::PosEmb => GradGroup::Embeddings,
            ParamClass::Head => GradGroup::Head,
            ParamClass::Norm if name.starts_with("ln_f.") => GradGroup::Head,
            ParamClass::Norm => GradGroup::Norms,
            ParamClass::Attn => GradGroup::Attention,
            ParamClass::FfnWeight | ParamClass::FfnBias => GradGroup::FfnDense,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GroupReport {
    pub group: GradGroup,
    pub size: usize,
    pub checked: usize,
    pub max_rel_err: f64,
    pub worst: String,
}

fn coordinate(model: &mut ToyModel, param: usize, offset: usize, f: impl FnOnce(&mut f64)) {
    let mut k = 0;
    let mut f = Some(f);
    model.for_each_param_mut(&mut |_, _, s| {
        if k == param {
            (f.take().expect("visited once"))(&mut s[offset]);
        }
        k += 1;
    });
}

/// Compares analytic gradients of the objective (all parameters trainable)
/// against central differences on up to `per_group` random coordinates of
/// every group.
pub fn check(
    model: &ToyModel,
    batch: &Batch,
    spec: ObjectiveSpec<'_>,
    teacher: Option<&Matrix>,
    per_group: usize,
    rng: &mut SeededRng,
) -> Result<Vec<GroupReport>> {
    let mut grads = model.zeros_like();
    objective(model, batch, spec, teacher, Some((&mut grads, Trainable::all())))?;
    let mut analytic: Vec<Vec<f64>> = Vec::new();
    grads.for_each_param(&mut |_, _, s| analytic.push(s.to_vec()));

    let mut params: Vec<(String, GradGroup, usize)> = Vec::new();
    model.for_each_param(&mut |name, class, s| params.push((name.to_string(), GradGroup::of(name, class), s.len())));

    let mut groups: Vec<GradGroup> = params.iter().map(|p| p.1).collect();
    groups.sort();
    groups.dedup();

    let mut work = model.clone();
    let mut reports = Vec::new();
    for group in groups {
        let coords: Vec<(usize, usize)> = params
            .iter()
            .enumerate()
            .filter(|(_, p)| p.1 == group)
            .flat_map(|(i, p)| (0..p.2).map(move |j| (i, j)))
            .collect();
        let mut order: Vec<usize> = (0..coords.len()).collect();
        let take = per_group.min(coords.len());
        for i in 0..take {
            let j = i + rng.below(coords.len() - i);
            order.swap(i, j);
        }
        let mut max_rel = 0.0f64;
        let mut worst = String::new();
        for &c in &order[..take] {
            let (pi, off) = coords[c];
            let mut theta = 0.0;
            coordinate(&mut work, pi, off, |v| theta = *v);
            let h = STEP * theta.abs().max(1.0);
            coordinate(&mut work, pi, off, |v| *v = theta + h);
            let plus = objective(&work, batch, spec, teacher, None)?.total;
            coordinate(&mut work, pi, off, |v| *v = theta - h);
            let minus = objective(&work, batch, spec, teacher, None)?.total;
            coordinate(&mut work, pi, off, |v| *v = theta);
            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic[pi][off];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(REL_FLOOR);
            if rel > max_rel || worst.is_empty() {
                max_rel = max_rel.max(rel);
                worst = format!("{}[{off}]: analytic {a:e}, numeric {numeric:e}", params[pi].0);
            }
        }
        reports.push(GroupReport { group, size: coords.len(), checked: take, max_rel_err: max_rel, worst });
    }
    Ok(reports)
}

/// Micro model mid-fade with non-trivial adapters, a labelled batch and
/// fixed teacher logits for its supervised rows.
pub struct Fixture {
    pub model: ToyModel,
    pub batch: Batch,
    pub teacher: Matrix,
}

/// Two layers, `d_model = 8`, `V = 11`; layer `K = 1` gets `B = 3`.
pub fn micro_fixture(seed: u64) -> Result<Fixture> {
    use crate::allocator::heuristic_plan;
    use crate::loss::{gather_rows, supervised, IGNORE_INDEX};

    let config = super::ToyModelConfig { seed, ..super::ToyModelConfig::micro() };
    let dense = ToyModel::dense(&config)?;
    let plan = heuristic_plan(&dense.descriptors(), 0, 1)?;
    let mut model = dense.swap(&plan)?;
    let mut rng = SeededRng::new(seed).fork(0x6763);
    for b in &mut model.blocks {
        for l in b.attn.lora.iter_mut().flatten() {
            l.up = rng.normal_matrix(l.up.rows(), l.up.cols(), 0.5);
        }
    }
    let (seqs, len) = (3, 6);
    let tokens: Vec<usize> = (0..seqs * len).map(|_| rng.below(config.vocab)).collect();
    let labels: Vec<i64> = (0..seqs * len)
        .map(|i| if i % len < 2 { IGNORE_INDEX } else { rng.below(config.vocab) as i64 })
        .collect();
    let batch = Batch::new(seqs, len, tokens, labels)?;
    // A distinct teacher: the dense path with perturbed adapters.
    let mut other = model.clone();
    for b in &mut other.blocks {
        for l in b.attn.lora.iter_mut().flatten() {
            l.up = rng.normal_matrix(l.up.rows(), l.up.cols(), 0.5);
        }
    }
    let (rows, _) = supervised(&batch.labels);
    let teacher = gather_rows(&other.teacher_forward(&batch)?, &rows);
    Ok(Fixture { model, batch, teacher })
}
