//! Desk-scale decoder with residual-PHM FFNs and LoRA-adapted attention,
//! trained end to end with hand-written gradients.

pub mod checkpoint;
pub mod config;
pub mod gradcheck;
pub mod layers;
pub mod optim;
pub mod task;
pub mod train;
pub mod transformer;

pub use config::{Ablation, OptimConfig, RunConfig, TaskConfig, ToyModelConfig, TrainConfig};
pub use task::{Batch, Sample, SyntheticTask};
pub use train::{
    compress, eval_ce, objective, pretrain_dense, select_best, train_stage_a, train_stage_b, LogRecord, LossTerms,
    ObjectiveSpec, Snapshot, Stage, TrainState,
};
pub use transformer::{ParamClass, ToyModel, Trainable};

use crate::allocator::AllocationPlan;
use crate::error::Result;

/// Dense model from `config.seed` with `plan` applied.
pub fn build_and_swap(config: &ToyModelConfig, plan: &AllocationPlan) -> Result<ToyModel> {
    ToyModel::dense(config)?.swap(plan)
}
