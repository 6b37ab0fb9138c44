//! Dense pretraining, Stage A (residual adaptation under the fade) and
//! Stage B (PHM-only fine-tuning).

use serde::{Deserialize, Serialize};

use crate::error::{PhmError, Result};
use crate::linalg::{Matrix, SeededRng};
use crate::loss::{ce_label_smoothed, ce_label_smoothed_with_grad, gather_rows, kd_loss_with_grad, recon_layer, supervised, ReconNorm};
use crate::schedule::TrainSchedule;

use super::config::TrainConfig;
use super::optim::{lr_at, AdamW};
use super::task::{Batch, Sample, SyntheticTask};
use super::transformer::{ParamClass, ToyModel, Trainable};

/// One line of the JSONL training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub stage: Stage,
    pub step: usize,
    pub alpha: f64,
    pub lambda: f64,
    pub ce: f64,
    /// Zero when no teacher pass ran at this step.
    pub kd: f64,
    pub recon: f64,
    pub total: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub val_ce_phm: Option<f64>,
    /// Validation CE of the blended model at the current α.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub val_ce_blend: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Stage {
    #[serde(rename = "pretrain")]
    Pretrain,
    A,
    B,
}

/// Loss components of one step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossTerms {
    pub ce: f64,
    pub kd: f64,
    pub recon: f64,
    pub total: f64,
}

/// Fixed inputs of the objective at one step.
#[derive(Debug, Clone, Copy)]
pub struct ObjectiveSpec<'a> {
    pub alpha: f64,
    pub lambda: f64,
    pub schedule: &'a TrainSchedule,
}

/// `(1−λ)·CE_ε + λ·KD + μ·recon` on the supervised tokens of `batch`.
///
/// `teacher` holds teacher logits for the supervised rows, in order; it is
/// a constant for differentiation. When `grads` is given, gradients of the
/// total for the `Trainable` classes are accumulated into it.
pub fn objective(
    model: &ToyModel,
    batch: &Batch,
    spec: ObjectiveSpec<'_>,
    teacher: Option<&Matrix>,
    grads: Option<(&mut ToyModel, Trainable)>,
) -> Result<LossTerms> {
    let s = spec.schedule;
    let mu = s.recon_weight;
    let recon_on = mu > 0.0 && model.has_residual();
    let need_cache = recon_on || grads.is_some();
    let (logits, cache) = if need_cache {
        let (l, c) = model.forward_cached(batch, spec.alpha, recon_on)?;
        (l, Some(c))
    } else {
        (model.forward(batch, spec.alpha)?, None)
    };
    let (rows, targets) = supervised(&batch.labels);
    let student = gather_rows(&logits, &rows);
    let (ce, dce) = ce_label_smoothed_with_grad(&student, &targets, s.label_smoothing)?;
    let (kd, dkd) = match teacher {
        Some(t) => {
            let (kd, g) = kd_loss_with_grad(t, &student, s.kd_temperature)?;
            (kd, Some(g))
        }
        None if spec.lambda > 0.0 => {
            return Err(PhmError::Config("λ > 0 needs teacher logits".into()));
        }
        None => (0.0, None),
    };

    let mut recon = 0.0;
    let mut d_phm = Vec::new();
    if recon_on {
        let cache = cache.as_ref().expect("cache kept for recon");
        let layers = cache.captured();
        let count = layers.len() as f64;
        let norm = ReconNorm::from_flag(s.recon_per_dim_norm);
        for l in &layers {
            let (v, diff) = recon_layer(&l.paths.phm, &l.paths.dense, norm)?;
            recon += v / count;
            let k = mu * 2.0 * norm.scale(diff.rows(), diff.cols()) / count;
            d_phm.push((l.layer, diff.scaled(k)));
        }
    }
    let lambda = spec.lambda;
    let total = (1.0 - lambda) * ce + lambda * kd + mu * recon;

    if let Some((g, want)) = grads {
        let cache = cache.expect("cache kept for backward");
        let mut dlogits = Matrix::zeros(logits.rows(), logits.cols());
        for (i, &r) in rows.iter().enumerate() {
            let out = dlogits.row_mut(r);
            for (j, o) in out.iter_mut().enumerate() {
                *o = (1.0 - lambda) * dce.get(i, j);
            }
            if let Some(dkd) = &dkd {
                for (o, &v) in out.iter_mut().zip(dkd.row(i)) {
                    *o += lambda * v;
                }
            }
        }
        model.backward(&cache, &dlogits, &d_phm, spec.alpha, want, g)?;
    }
    Ok(LossTerms { ce, kd, recon, total })
}

/// Plain (ε = 0) cross-entropy per supervised token over `samples`.
pub fn eval_ce(model: &ToyModel, samples: &[Sample], alpha: f64) -> Result<f64> {
    let mut sum = 0.0;
    let mut count = 0usize;
    for chunk in samples.chunks(64) {
        let refs: Vec<&Sample> = chunk.iter().collect();
        let batch = Batch::from_samples(&refs)?;
        let logits = model.forward(&batch, alpha)?;
        let (rows, targets) = supervised(&batch.labels);
        let ce = ce_label_smoothed(&gather_rows(&logits, &rows), &targets, 0.0)?;
        sum += ce * targets.len() as f64;
        count += targets.len();
    }
    if count == 0 {
        return Err(PhmError::EmptyBatch);
    }
    Ok(sum / count as f64)
}

/// Validation snapshot: PHM-only CE after `step` updates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Snapshot {
    pub step: usize,
    pub val_ce_phm: f64,
}

/// Index of the lowest metric; ties go to the later snapshot.
pub fn select_best(snapshots: &[Snapshot]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, s) in snapshots.iter().enumerate() {
        match best {
            Some(b) if snapshots[b].val_ce_phm < s.val_ce_phm => {}
            _ => best = Some(i),
        }
    }
    best
}

/// Progress of one stage.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub stage: Stage,
    /// Optimizer updates applied so far.
    pub step: usize,
    /// Sorted by step.
    pub snapshots: Vec<Snapshot>,
    /// Model at the currently selected snapshot.
    pub best: Option<(Snapshot, ToyModel)>,
    /// Teacher forward passes executed.
    pub teacher_forwards: usize,
}

impl TrainState {
    pub fn new(stage: Stage) -> Self {
        Self { stage, step: 0, snapshots: Vec::new(), best: None, teacher_forwards: 0 }
    }

    fn record(&mut self, snap: Snapshot, model: &ToyModel) {
        self.snapshots.push(snap);
        let replace = match &self.best {
            Some((b, _)) => snap.val_ce_phm <= b.val_ce_phm,
            None => true,
        };
        if replace {
            self.best = Some((snap, model.clone()));
        }
    }

    /// Best checkpoint by PHM-only validation CE.
    pub fn select_snapshot(&self) -> Result<(&Snapshot, &ToyModel)> {
        let (s, m) = self.best.as_ref().ok_or_else(|| PhmError::Config("no snapshots recorded".into()))?;
        debug_assert_eq!(select_best(&self.snapshots).map(|i| self.snapshots[i]), Some(*s));
        Ok((s, m))
    }

    pub fn initial_val_ce(&self) -> Option<f64> {
        self.snapshots.first().map(|s| s.val_ce_phm)
    }

    pub fn final_val_ce(&self) -> Option<f64> {
        self.snapshots.last().map(|s| s.val_ce_phm)
    }
}

pub type Logger<'a> = dyn FnMut(&LogRecord) -> Result<()> + 'a;

fn draw_batch(rng: &mut SeededRng, train: &[Sample], size: usize) -> Result<Batch> {
    let picks: Vec<&Sample> = (0..size).map(|_| &train[rng.below(train.len())]).collect();
    Batch::from_samples(&picks)
}

fn check_divergence(step: usize, terms: &LossTerms, threshold: f64) -> Result<()> {
    if !terms.total.is_finite() || terms.total > threshold {
        return Err(PhmError::Divergence {
            step,
            reason: format!(
                "loss {} (ce {}, kd {}, recon {}) exceeds {threshold}",
                terms.total, terms.ce, terms.kd, terms.recon
            ),
        });
    }
    Ok(())
}

/// Stage A trainable classes.
pub fn stage_trainable(cfg: &TrainConfig, tied: bool) -> Trainable {
    let mut t = Trainable::of(&[ParamClass::Core, ParamClass::LoraDown, ParamClass::LoraUp, ParamClass::Head]);
    if cfg.train_embeddings || tied {
        t = t.with(ParamClass::TokEmb);
    }
    if cfg.train_embeddings {
        t = t.with(ParamClass::PosEmb);
    }
    t
}

/// Trains the dense teacher on the pretraining stream.
pub fn pretrain_dense(model: &mut ToyModel, task: &SyntheticTask, cfg: &TrainConfig, log: &mut Logger<'_>) -> Result<()> {
    if model.has_residual() {
        return Err(PhmError::Config("pretraining expects a dense model".into()));
    }
    let mut rng = task.pretrain_rng();
    let want = Trainable::all();
    let mut opt = AdamW::new(cfg.optimizer.clone(), model, want);
    let schedule = TrainSchedule { lambda_max: 0.0, recon_weight: 0.0, ..cfg.schedule.clone() };
    let spec = ObjectiveSpec { alpha: 0.0, lambda: 0.0, schedule: &schedule };
    let mut grads = model.zeros_like();
    for step in 0..cfg.steps_pretrain {
        let samples: Vec<Sample> = (0..cfg.batch_size).map(|_| task.sample(&mut rng)).collect();
        let refs: Vec<&Sample> = samples.iter().collect();
        let batch = Batch::from_samples(&refs)?;
        grads.for_each_param_mut(&mut |_, _, s| s.fill(0.0));
        let terms = objective(model, &batch, spec, None, Some((&mut grads, want)))?;
        check_divergence(step, &terms, cfg.divergence_threshold)?;
        opt.step(model, &grads, lr_at(&cfg.optimizer, step, cfg.steps_pretrain))?;
        log(&LogRecord {
            stage: Stage::Pretrain,
            step,
            alpha: 0.0,
            lambda: 0.0,
            ce: terms.ce,
            kd: 0.0,
            recon: 0.0,
            total: terms.total,
            val_ce_phm: None,
            val_ce_blend: None,
        })?;
    }
    Ok(())
}

/// Residual adaptation. `state` keeps the snapshots even when a step fails,
/// so the caller can still retrieve the last good model.
pub fn train_stage_a(
    model: &mut ToyModel,
    task: &SyntheticTask,
    cfg: &TrainConfig,
    state: &mut TrainState,
    log: &mut Logger<'_>,
) -> Result<()> {
    cfg.validate()?;
    let (train, val) = task.finetune_split();
    let schedule = cfg.ablation.apply(&cfg.schedule);
    let want = stage_trainable(cfg, model.head.is_none());
    let mut opt = AdamW::new(cfg.optimizer.clone(), model, want);
    let mut rng = SeededRng::new(model.config.seed).fork(0x0a);
    let mut grads = model.zeros_like();
    *state = TrainState::new(Stage::A);
    state.record(Snapshot { step: 0, val_ce_phm: eval_ce(model, &val, 1.0)? }, model);

    for step in 0..cfg.steps_a {
        let alpha = cfg.ablation.alpha(&schedule, step);
        let lambda = schedule.lambda(step);
        let batch = draw_batch(&mut rng, &train, cfg.batch_size)?;
        let teacher = if lambda > 0.0 {
            state.teacher_forwards += 1;
            let (rows, _) = supervised(&batch.labels);
            Some(gather_rows(&model.teacher_forward(&batch)?, &rows))
        } else {
            None
        };
        grads.for_each_param_mut(&mut |_, _, s| s.fill(0.0));
        let spec = ObjectiveSpec { alpha, lambda, schedule: &schedule };
        let terms = objective(model, &batch, spec, teacher.as_ref(), Some((&mut grads, want)))?;
        check_divergence(step, &terms, cfg.divergence_threshold)?;
        opt.step(model, &grads, lr_at(&cfg.optimizer, step, cfg.steps_a))
            .map_err(|e| PhmError::Divergence { step, reason: e.to_string() })?;
        state.step = step + 1;

        let evaluate = (step + 1) % cfg.eval_every == 0 || step + 1 == cfg.steps_a;
        let (val_ce_phm, val_ce_blend) = if evaluate {
            let phm = eval_ce(model, &val, 1.0)?;
            state.record(Snapshot { step: step + 1, val_ce_phm: phm }, model);
            (Some(phm), Some(eval_ce(model, &val, alpha)?))
        } else {
            (None, None)
        };
        log(&LogRecord {
            stage: Stage::A,
            step,
            alpha,
            lambda,
            ce: terms.ce,
            kd: terms.kd,
            recon: terms.recon,
            total: terms.total,
            val_ce_phm,
            val_ce_blend,
        })?;
    }
    Ok(())
}

/// PHM-only fine-tuning of a collapsed model. With `teacher`, adds a
/// `light_kd_lambda`-weighted distillation term against its α = 0 output.
pub fn train_stage_b(
    model: &mut ToyModel,
    task: &SyntheticTask,
    cfg: &TrainConfig,
    teacher: Option<&ToyModel>,
    state: &mut TrainState,
    log: &mut Logger<'_>,
) -> Result<()> {
    if model.has_residual() {
        return Err(PhmError::Config("Stage B expects a collapsed model".into()));
    }
    let (train, val) = task.finetune_split();
    let want = stage_trainable(cfg, model.head.is_none());
    let mut opt = AdamW::new(cfg.optimizer.clone(), model, want);
    let mut rng = SeededRng::new(model.config.seed).fork(0x0b);
    let mut grads = model.zeros_like();
    let lambda = if teacher.is_some() { cfg.light_kd_lambda } else { 0.0 };
    let schedule = TrainSchedule { recon_weight: 0.0, ..cfg.schedule.clone() };
    *state = TrainState::new(Stage::B);
    state.record(Snapshot { step: 0, val_ce_phm: eval_ce(model, &val, 1.0)? }, model);

    for step in 0..cfg.steps_b {
        let batch = draw_batch(&mut rng, &train, cfg.batch_size)?;
        let t_logits = match teacher {
            Some(t) => {
                state.teacher_forwards += 1;
                let (rows, _) = supervised(&batch.labels);
                Some(gather_rows(&t.teacher_forward(&batch)?, &rows))
            }
            None => None,
        };
        grads.for_each_param_mut(&mut |_, _, s| s.fill(0.0));
        let spec = ObjectiveSpec { alpha: 1.0, lambda, schedule: &schedule };
        let terms = objective(model, &batch, spec, t_logits.as_ref(), Some((&mut grads, want)))?;
        check_divergence(step, &terms, cfg.divergence_threshold)?;
        opt.step(model, &grads, lr_at(&cfg.optimizer, step, cfg.steps_b))
            .map_err(|e| PhmError::Divergence { step, reason: e.to_string() })?;
        state.step = step + 1;
        let evaluate = (step + 1) % cfg.eval_every == 0 || step + 1 == cfg.steps_b;
        let val_ce_phm = if evaluate {
            let v = eval_ce(model, &val, 1.0)?;
            state.record(Snapshot { step: step + 1, val_ce_phm: v }, model);
            Some(v)
        } else {
            None
        };
        log(&LogRecord {
            stage: Stage::B,
            step,
            alpha: 1.0,
            lambda,
            ce: terms.ce,
            kd: terms.kd,
            recon: 0.0,
            total: terms.total,
            val_ce_phm,
            val_ce_blend: None,
        })?;
    }
    Ok(())
}

/// Result of Stage A → selection → collapse → Stage B → merge.
pub struct CompressionRun {
    pub stage_a: TrainState,
    pub stage_b: TrainState,
    /// Selected Stage A model, before collapse.
    pub selected: ToyModel,
    pub collapsed: ToyModel,
    /// Stage B output with LoRA merged.
    pub deployed: ToyModel,
}

/// Runs the compression stages on an already swapped model.
pub fn compress(
    swapped: ToyModel,
    task: &SyntheticTask,
    cfg: &TrainConfig,
    log: &mut Logger<'_>,
) -> Result<CompressionRun> {
    let mut model = swapped;
    let mut stage_a = TrainState::new(Stage::A);
    train_stage_a(&mut model, task, cfg, &mut stage_a, log)?;
    let selected = stage_a.select_snapshot()?.1.clone();
    let collapsed = selected.clone().collapse();
    let mut tuned = collapsed.clone();
    let mut stage_b = TrainState::new(Stage::B);
    let teacher = cfg.light_kd.then_some(&selected);
    train_stage_b(&mut tuned, task, cfg, teacher, &mut stage_b, log)?;
    let deployed = tuned.lora_merge()?;
    Ok(CompressionRun { stage_a, stage_b, selected, collapsed, deployed })
}

/// Shorthand for a seeded task matching the model vocabulary.
pub fn task_for(model_seed: u64, vocab: usize, cfg: &TrainConfig) -> Result<SyntheticTask> {
    SyntheticTask::new(cfg.task.clone(), vocab, model_seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::allocator::heuristic_plan;
    use crate::loss::{kd_loss, recon_loss};
    use crate::model::config::{TaskConfig, ToyModelConfig};
    use crate::model::layers::FfnLinear;

    fn micro_setup() -> (ToyModel, SyntheticTask, TrainConfig) {
        let mc = ToyModelConfig::micro();
        let cfg = TrainConfig {
            task: TaskConfig { content_len: 3, noise: 0.1, finetune_samples: 40, val_fraction: 0.25 },
            batch_size: 4,
            steps_pretrain: 5,
            steps_a: 12,
            steps_b: 4,
            eval_every: 5,
            schedule: TrainSchedule { t_fade: 6, ..Default::default() },
            ..Default::default()
        };
        let task = task_for(mc.seed, mc.vocab, &cfg).unwrap();
        let dense = ToyModel::dense(&mc).unwrap();
        let plan = heuristic_plan(&dense.descriptors(), 0, 1).unwrap();
        (dense.swap(&plan).unwrap(), task, cfg)
    }

    fn no_log() -> impl FnMut(&LogRecord) -> Result<()> {
        |_| Ok(())
    }

    #[test]
    fn snapshot_selection_rules() {
        let s = |step, v| Snapshot { step, val_ce_phm: v };
        assert_eq!(select_best(&[s(0, 2.0)]), Some(0));
        assert_eq!(select_best(&[s(0, 3.2), s(1, 1.1), s(2, 1.4)]), Some(1));
        assert_eq!(select_best(&[s(0, 1.1), s(1, 1.1)]), Some(1));
        assert_eq!(select_best(&[]), None);
        assert!(TrainState::new(Stage::A).select_snapshot().is_err());
    }

    #[test]
    fn step_zero_has_no_distillation_gap() {
        let (model, task, cfg) = micro_setup();
        let (train, _) = task.finetune_split();
        let refs: Vec<&Sample> = train[..4].iter().collect();
        let batch = Batch::from_samples(&refs).unwrap();
        let (rows, _) = supervised(&batch.labels);
        let teacher = gather_rows(&model.teacher_forward(&batch).unwrap(), &rows);
        let student = gather_rows(&model.forward(&batch, cfg.schedule.alpha(0)).unwrap(), &rows);
        assert_eq!(kd_loss(&teacher, &student, 4.0).unwrap(), 0.0);
        let spec = ObjectiveSpec { alpha: 0.0, lambda: cfg.schedule.lambda(0), schedule: &cfg.schedule };
        let t = objective(&model, &batch, spec, Some(&teacher), None).unwrap();
        assert_eq!(t.total, t.ce + cfg.schedule.recon_weight * t.recon);
    }

    #[test]
    fn captured_recon_matches_block_recon() {
        let (model, task, cfg) = micro_setup();
        let (train, _) = task.finetune_split();
        let refs: Vec<&Sample> = train[..3].iter().collect();
        let batch = Batch::from_samples(&refs).unwrap();
        let spec = ObjectiveSpec { alpha: 0.3, lambda: 0.0, schedule: &cfg.schedule };
        let t = objective(&model, &batch, spec, None, None).unwrap();
        let (_, cache) = model.forward_cached(&batch, 0.3, true).unwrap();
        let layers: Vec<_> = cache
            .captured()
            .iter()
            .map(|c| match model.ffn(c.layer) {
                FfnLinear::Residual(r) => (r.clone(), c.input.clone()),
                _ => unreachable!(),
            })
            .collect();
        let pairs: Vec<_> = layers.iter().map(|(r, x)| (r, x)).collect();
        let want = recon_loss(&pairs, ReconNorm::PerTokenPerDim).unwrap();
        assert!((t.recon - want.value).abs() < 1e-12);
    }

    #[test]
    fn ce_only_gives_zero_core_grads_at_alpha_zero() {
        let (model, task, _) = micro_setup();
        let (train, _) = task.finetune_split();
        let refs: Vec<&Sample> = train[..3].iter().collect();
        let batch = Batch::from_samples(&refs).unwrap();
        let schedule = TrainSchedule { recon_weight: 0.0, ..Default::default() };
        let mut g = model.zeros_like();
        let spec = ObjectiveSpec { alpha: 0.0, lambda: 0.0, schedule: &schedule };
        objective(&model, &batch, spec, None, Some((&mut g, Trainable::all()))).unwrap();
        g.for_each_param(&mut |name, class, s| {
            if class == ParamClass::Core {
                assert!(s.iter().all(|&v| v == 0.0), "{name}");
            }
        });
        // with recon the cores do receive gradient at α = 0
        let schedule = TrainSchedule { recon_weight: 1.0, ..Default::default() };
        let mut g = model.zeros_like();
        let spec = ObjectiveSpec { alpha: 0.0, lambda: 0.0, schedule: &schedule };
        objective(&model, &batch, spec, None, Some((&mut g, Trainable::all()))).unwrap();
        let mut any = false;
        g.for_each_param(&mut |_, class, s| any |= class == ParamClass::Core && s.iter().any(|&v| v != 0.0));
        assert!(any);
    }

    #[test]
    fn stage_a_freezes_dense_and_is_deterministic() {
        let (model, task, cfg) = micro_setup();
        let mut logs_a = Vec::new();
        let mut m1 = model.clone();
        let mut s1 = TrainState::new(Stage::A);
        train_stage_a(&mut m1, &task, &cfg, &mut s1, &mut |r| {
            logs_a.push(serde_json::to_string(r).unwrap());
            Ok(())
        })
        .unwrap();
        let mut logs_b = Vec::new();
        let mut m2 = model.clone();
        let mut s2 = TrainState::new(Stage::A);
        train_stage_a(&mut m2, &task, &cfg, &mut s2, &mut |r| {
            logs_b.push(serde_json::to_string(r).unwrap());
            Ok(())
        })
        .unwrap();
        assert_eq!(logs_a, logs_b);
        assert_eq!(logs_a.len(), cfg.steps_a);
        // snapshots at 0, 5, 10 and the final step
        let steps: Vec<usize> = s1.snapshots.iter().map(|s| s.step).collect();
        assert_eq!(steps, vec![0, 5, 10, 12]);
        for (a, b) in model.blocks.iter().zip(&m1.blocks) {
            assert_eq!(a.attn.w, b.attn.w);
            assert_eq!(a.ln1, b.ln1);
            for (x, y) in [(&a.ffn_up, &b.ffn_up), (&a.ffn_down, &b.ffn_down)] {
                match (x, y) {
                    (FfnLinear::Residual(x), FfnLinear::Residual(y)) => {
                        assert_eq!(x.dense, y.dense);
                        assert_eq!(x.bias, y.bias);
                    }
                    (FfnLinear::Dense { weight: w1, .. }, FfnLinear::Dense { weight: w2, .. }) => assert_eq!(w1, w2),
                    _ => panic!("layer kind changed"),
                }
            }
        }
        assert_eq!(model.tok_emb, m1.tok_emb);
        assert_ne!(model.head, m1.head);
    }

    #[test]
    fn stage_b_teacher_counter() {
        let (model, task, cfg) = micro_setup();
        let collapsed = model.clone().collapse();
        let mut m = collapsed.clone();
        let mut st = TrainState::new(Stage::B);
        train_stage_b(&mut m, &task, &cfg, None, &mut st, &mut no_log()).unwrap();
        assert_eq!(st.teacher_forwards, 0);
        let mut m = collapsed.clone();
        train_stage_b(&mut m, &task, &cfg, Some(&model), &mut st, &mut no_log()).unwrap();
        assert_eq!(st.teacher_forwards, cfg.steps_b);
        let zero = TrainConfig { steps_b: 0, ..cfg.clone() };
        let mut m = collapsed.clone();
        train_stage_b(&mut m, &task, &zero, None, &mut st, &mut no_log()).unwrap();
        assert_eq!(m, collapsed);
        assert!(train_stage_b(&mut model.clone(), &task, &cfg, None, &mut st, &mut no_log()).is_err());
    }

    #[test]
    fn divergence_is_reported() {
        let (model, task, mut cfg) = micro_setup();
        cfg.divergence_threshold = 1e-3;
        let mut m = model.clone();
        let mut st = TrainState::new(Stage::A);
        let err = train_stage_a(&mut m, &task, &cfg, &mut st, &mut no_log()).unwrap_err();
        assert!(matches!(err, PhmError::Divergence { step: 0, .. }));
        assert!(st.select_snapshot().is_ok());
    }

    #[test]
    fn pipeline_runs_end_to_end() {
        let (model, task, cfg) = micro_setup();
        let run = compress(model, &task, &cfg, &mut no_log()).unwrap();
        assert!(!run.deployed.has_residual());
        assert!(!run.deployed.layout().lora);
        assert!(run.stage_b.final_val_ce().unwrap().is_finite());
    }
}
