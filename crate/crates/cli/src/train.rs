//! The `train` subcommand: pretrain (or load) a dense teacher, swap in
//! residual PHM blocks, run Stage A, select a snapshot, collapse, run
//! Stage B and merge the adapters. Everything lands in one run directory
//! that appears atomically.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::Args;
use phm_core::allocator::{accounting, Accounting, AllocationPlan, ExtraParams, SensitivityProfile};
use phm_core::error::PhmError;
use phm_core::linalg::Matrix;
use phm_core::model::checkpoint::{self, CheckpointMeta};
use phm_core::model::layers::FfnLinear;
use phm_core::model::train::{task_for, train_stage_a, train_stage_b};
use phm_core::model::{
    objective, pretrain_dense, Ablation, Batch, LogRecord, ObjectiveSpec, ParamClass, RunConfig, Snapshot, Stage,
    SyntheticTask, ToyModel, TrainState, Trainable,
};
use phm_core::schedule::TrainSchedule;
use serde::{Deserialize, Serialize};

use crate::{publish, read_json, require_out, staging_dir, write_json, Globals};

pub const CONFIG: &str = "config.json";
pub const PLAN: &str = "plan.json";
pub const MANIFEST: &str = "model_manifest.json";
pub const PROFILE: &str = "profile.json";
pub const LOG: &str = "log.jsonl";
pub const SUMMARY: &str = "run_summary.json";
pub const CHECKPOINTS: &str = "checkpoints";

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Run configuration (model and training); defaults when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Allocation plan from `phm allocate`.
    #[arg(long)]
    pub plan: PathBuf,
    /// Dense checkpoint to use as the teacher instead of pretraining.
    #[arg(long)]
    pub teacher: Option<PathBuf>,
    #[arg(long)]
    pub steps_pretrain: Option<usize>,
    #[arg(long)]
    pub steps_a: Option<usize>,
    #[arg(long)]
    pub steps_b: Option<usize>,
    /// Remove one stabilizer: no-kd, no-recon or no-residual.
    #[arg(long, value_parser = parse_ablation)]
    pub ablate: Option<Ablation>,
    /// Samples for the empirical Fisher traces in `profile.json`.
    #[arg(long, default_value_t = 32)]
    pub fisher_samples: usize,
}

fn parse_ablation(s: &str) -> std::result::Result<Ablation, String> {
    Ablation::parse(s).map_err(|e| e.to_string())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageSummary {
    /// Optimizer updates completed.
    pub steps: usize,
    pub initial_val_ce_phm: Option<f64>,
    pub final_val_ce_phm: Option<f64>,
    pub selected_step: Option<usize>,
    pub selected_val_ce_phm: Option<f64>,
    pub teacher_forwards: usize,
    pub snapshots: Vec<Snapshot>,
}

impl StageSummary {
    fn of(state: &TrainState) -> Self {
        let best = state.best.as_ref().map(|(s, _)| *s);
        Self {
            steps: state.step,
            initial_val_ce_phm: state.initial_val_ce(),
            final_val_ce_phm: state.final_val_ce(),
            selected_step: best.map(|s| s.step),
            selected_val_ce_phm: best.map(|s| s.val_ce_phm),
            teacher_forwards: state.teacher_forwards,
            snapshots: state.snapshots.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    /// `completed` or `diverged`.
    pub status: String,
    pub error: Option<String>,
    pub seed: u64,
    pub threads: usize,
    pub ablation: Ablation,
    /// Token count `N` used for the FLOP columns (one sequence).
    pub flop_tokens: usize,
    pub extras: ExtraParams,
    pub accounting: Accounting,
    /// Parameter count of the collapsed model, when Stage A finished.
    pub collapsed_params: Option<usize>,
    pub pretrain_steps: usize,
    pub teacher_val_ce: Option<f64>,
    pub stage_a: Option<StageSummary>,
    pub stage_b: Option<StageSummary>,
    /// Checkpoint directories under `checkpoints/`.
    pub checkpoints: Vec<String>,
}

/// Diagonal empirical Fisher of each FFN weight of a dense model, from
/// per-sequence gradients of the unsmoothed CE.
pub fn fisher_profile(teacher: &ToyModel, task: &SyntheticTask, samples: usize) -> Result<SensitivityProfile> {
    let (train, _) = task.finetune_split();
    let samples = samples.min(train.len());
    let schedule = TrainSchedule { label_smoothing: 0.0, lambda_max: 0.0, recon_weight: 0.0, ..TrainSchedule::default() };
    let spec = ObjectiveSpec { alpha: 0.0, lambda: 0.0, schedule: &schedule };
    let want = Trainable::of(&[ParamClass::FfnWeight]);
    let ffn_count = 2 * teacher.config.layers;
    let mut grads = teacher.zeros_like();
    let traces = phm_core::allocator::fisher_trace_estimate(samples, |s| {
        let batch = Batch::from_samples(&[&train[s]])?;
        grads.for_each_param_mut(&mut |_, _, v| v.fill(0.0));
        objective(teacher, &batch, spec, None, Some((&mut grads, want)))?;
        Ok((0..ffn_count)
            .filter_map(|id| match grads.ffn(id) {
                FfnLinear::Dense { weight, .. } => Some((id, weight.clone())),
                _ => None,
            })
            .collect::<Vec<(usize, Matrix)>>())
    })?;
    let weights: BTreeMap<usize, &Matrix> = (0..ffn_count)
        .filter_map(|id| match teacher.ffn(id) {
            FfnLinear::Dense { weight, .. } => Some((id, weight)),
            _ => None,
        })
        .collect();
    Ok(SensitivityProfile::from_weights(traces, &weights)?)
}

/// Resolved configuration after applying command-line overrides.
pub fn resolve_config(args: &TrainArgs, g: &Globals) -> Result<RunConfig> {
    let mut cfg: RunConfig = match &args.config {
        Some(p) => read_json(p)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = g.seed {
        cfg.model.seed = seed;
    }
    if let Some(s) = args.steps_pretrain {
        cfg.train.steps_pretrain = s;
    }
    if let Some(s) = args.steps_a {
        cfg.train.steps_a = s;
    }
    if let Some(s) = args.steps_b {
        cfg.train.steps_b = s;
    }
    if let Some(a) = args.ablate {
        cfg.train.ablation = a;
    }
    cfg.model.validate()?;
    cfg.train.validate()?;
    Ok(cfg)
}

struct RunDir {
    root: PathBuf,
    log: BufWriter<File>,
    checkpoints: Vec<String>,
}

impl RunDir {
    fn save(&mut self, name: &str, model: &ToyModel, meta: CheckpointMeta) -> Result<()> {
        checkpoint::save(model, &meta, &self.root.join(CHECKPOINTS).join(name))?;
        self.checkpoints.push(name.to_string());
        Ok(())
    }

    fn logger(log: &mut BufWriter<File>) -> impl FnMut(&LogRecord) -> phm_core::error::Result<()> + '_ {
        move |r| {
            serde_json::to_writer(&mut *log, r)?;
            log.write_all(b"\n")?;
            Ok(())
        }
    }
}

/// Turns numeric failures during training into divergence at `step`.
fn as_divergence(e: PhmError, step: usize) -> PhmError {
    match e {
        PhmError::Numeric(reason) => PhmError::Divergence { step, reason },
        other => other,
    }
}

enum Outcome {
    Completed,
    Diverged(PhmError),
}

pub fn run(args: &TrainArgs, g: &Globals) -> Result<()> {
    let cfg = resolve_config(args, g)?;
    let out = require_out(g, "train")?.to_path_buf();
    let plan: AllocationPlan = read_json(&args.plan)?;
    let teacher = match &args.teacher {
        Some(dir) => {
            let (m, _) = checkpoint::load(dir).with_context(|| format!("loading teacher {}", dir.display()))?;
            if m.has_residual() || m.config != cfg.model {
                bail!(PhmError::Config(format!("{} is not a dense model with this configuration", dir.display())));
            }
            Some(m)
        }
        None => None,
    };
    let manifest = ToyModel::dense(&cfg.model)?.descriptors();
    plan.validate(&manifest.layers)?;

    let tmp = staging_dir(&out)?;
    let result = execute(&cfg, &plan, teacher, args.fisher_samples, g, &tmp);
    match result {
        Ok(Outcome::Completed) => publish(&tmp, &out),
        Ok(Outcome::Diverged(e)) => {
            publish(&tmp, &out)?;
            Err(e).with_context(|| format!("last good checkpoint kept in {}", out.join(CHECKPOINTS).display()))
        }
        Err(e) => {
            let _ = fs::remove_dir_all(&tmp);
            Err(e)
        }
    }
}

fn execute(
    cfg: &RunConfig,
    plan: &AllocationPlan,
    teacher: Option<ToyModel>,
    fisher_samples: usize,
    g: &Globals,
    root: &Path,
) -> Result<Outcome> {
    let (mc, tc) = (&cfg.model, &cfg.train);
    write_json(&root.join(CONFIG), cfg)?;
    write_json(&root.join(PLAN), plan)?;
    let manifest = ToyModel::dense(mc)?.descriptors();
    write_json(&root.join(MANIFEST), &manifest)?;
    fs::create_dir_all(root.join(CHECKPOINTS))?;
    let mut dir = RunDir { root: root.to_path_buf(), log: BufWriter::new(File::create(root.join(LOG))?), checkpoints: Vec::new() };
    let task = task_for(mc.seed, mc.vocab, tc)?;
    let (_, val) = task.finetune_split();

    let meta = |stage, step, metric| CheckpointMeta { stage, step, metric, plan: Some(plan.clone()) };
    let swapped_extras = ToyModel::dense(mc)?.swap(plan)?.extra_params();
    let mut summary = RunSummary {
        status: "completed".into(),
        error: None,
        seed: mc.seed,
        threads: g.threads,
        ablation: tc.ablation,
        flop_tokens: task.seq_len(),
        extras: swapped_extras,
        accounting: accounting(plan, &manifest.layers, swapped_extras),
        collapsed_params: None,
        pretrain_steps: 0,
        teacher_val_ce: None,
        stage_a: None,
        stage_b: None,
        checkpoints: Vec::new(),
    };

    let diverged = |dir: &mut RunDir, summary: &mut RunSummary, model: &ToyModel, stage, step, e: PhmError| -> Result<Outcome> {
        let e = as_divergence(e, step);
        if !matches!(e, PhmError::Divergence { .. }) {
            return Err(e.into());
        }
        eprintln!("{e}; saving the last good parameters");
        dir.save("last_good", model, CheckpointMeta { stage, step, metric: None, plan: None })?;
        summary.status = "diverged".into();
        summary.error = Some(e.to_string());
        finish(dir, summary)?;
        Ok(Outcome::Diverged(e))
    };

    // Dense teacher.
    let teacher = match teacher {
        Some(t) => t,
        None => {
            let mut t = ToyModel::dense(mc)?;
            let r = pretrain_dense(&mut t, &task, tc, &mut RunDir::logger(&mut dir.log));
            if let Err(e) = r {
                let step = tc.steps_pretrain;
                return diverged(&mut dir, &mut summary, &t, Stage::Pretrain, step, e);
            }
            summary.pretrain_steps = tc.steps_pretrain;
            t
        }
    };
    let teacher_ce = phm_core::model::eval_ce(&teacher, &val, 0.0)?;
    summary.teacher_val_ce = Some(teacher_ce);
    eprintln!("teacher val CE {teacher_ce:.4}");
    dir.save("teacher", &teacher, meta(Stage::Pretrain, summary.pretrain_steps, Some(teacher_ce)))?;
    write_json(&root.join(PROFILE), &fisher_profile(&teacher, &task, fisher_samples)?)?;

    // Stage A.
    let mut model = teacher.swap(plan)?;
    let init_ce = phm_core::model::eval_ce(&model, &val, 1.0)?;
    eprintln!("initialized PHM-only val CE {init_ce:.4}");
    dir.save("init", &model, meta(Stage::A, 0, Some(init_ce)))?;
    if tc.steps_a == 0 && tc.steps_b == 0 {
        let mut st = TrainState::new(Stage::A);
        st.snapshots.push(Snapshot { step: 0, val_ce_phm: init_ce });
        summary.stage_a = Some(StageSummary::of(&st));
        finish(&mut dir, &mut summary)?;
        return Ok(Outcome::Completed);
    }
    let mut state_a = TrainState::new(Stage::A);
    let r = train_stage_a(&mut model, &task, tc, &mut state_a, &mut RunDir::logger(&mut dir.log));
    if let Err(e) = r {
        summary.stage_a = Some(StageSummary::of(&state_a));
        let step = state_a.step;
        return diverged(&mut dir, &mut summary, &model, Stage::A, step, e);
    }
    summary.stage_a = Some(StageSummary::of(&state_a));
    let (snap, selected) = state_a.select_snapshot()?;
    eprintln!("stage A: selected step {} with PHM-only val CE {:.4}", snap.step, snap.val_ce_phm);
    dir.save("stage_a", selected, meta(Stage::A, snap.step, Some(snap.val_ce_phm)))?;

    // Collapse and Stage B.
    let collapsed = selected.clone().collapse();
    summary.collapsed_params = Some(collapsed.param_count());
    if collapsed.param_count() != summary.accounting.params_after {
        bail!(
            "collapsed model holds {} parameters, accounting says {}",
            collapsed.param_count(),
            summary.accounting.params_after
        );
    }
    dir.save("collapsed", &collapsed, meta(Stage::B, 0, Some(snap.val_ce_phm)))?;
    let light_teacher = tc.light_kd.then(|| selected.clone());
    let mut tuned = collapsed;
    let mut state_b = TrainState::new(Stage::B);
    let r = train_stage_b(&mut tuned, &task, tc, light_teacher.as_ref(), &mut state_b, &mut RunDir::logger(&mut dir.log));
    if let Err(e) = r {
        summary.stage_b = Some(StageSummary::of(&state_b));
        let step = state_b.step;
        return diverged(&mut dir, &mut summary, &tuned, Stage::B, step, e);
    }
    summary.stage_b = Some(StageSummary::of(&state_b));
    let final_ce = state_b.final_val_ce();
    let deployed = tuned.lora_merge()?;
    dir.save("final", &deployed, meta(Stage::B, state_b.step, final_ce))?;
    eprintln!(
        "done: ρ = {:.4}, final PHM-only val CE {}",
        summary.accounting.rho,
        final_ce.map(|v| format!("{v:.4}")).unwrap_or_default()
    );
    finish(&mut dir, &mut summary)?;
    Ok(Outcome::Completed)
}

fn finish(dir: &mut RunDir, summary: &mut RunSummary) -> Result<()> {
    dir.log.flush()?;
    summary.checkpoints = dir.checkpoints.clone();
    write_json(&dir.root.join(SUMMARY), summary)
}
