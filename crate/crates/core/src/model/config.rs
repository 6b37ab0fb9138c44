use serde::{Deserialize, Serialize};

use crate::error::{PhmError, Result};
use crate::schedule::TrainSchedule;

fn default_seed() -> u64 {
    0
}

/// Shape of the toy decoder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyModelConfig {
    #[serde(rename = "L_lang")]
    pub layers: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub heads: usize,
    pub vocab: usize,
    pub max_seq: usize,
    pub lora_rank: usize,
    pub lora_scale: f64,
    #[serde(default = "default_seed")]
    pub seed: u64,
    /// Reuse the token embedding as the output head.
    #[serde(default)]
    pub tie_embeddings: bool,
}

impl Default for ToyModelConfig {
    fn default() -> Self {
        Self {
            layers: 6,
            d_model: 64,
            d_ff: 256,
            heads: 4,
            vocab: 64,
            max_seq: 32,
            lora_rank: 4,
            lora_scale: 1.0,
            seed: 0,
            tie_embeddings: false,
        }
    }
}

impl ToyModelConfig {
    /// Two layers, `d_model = 8`, `V = 11`: small enough for finite differences.
    pub fn micro() -> Self {
        Self {
            layers: 2,
            d_model: 8,
            d_ff: 16,
            heads: 2,
            vocab: 11,
            max_seq: 8,
            lora_rank: 2,
            lora_scale: 1.0,
            seed: 0,
            tie_embeddings: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(PhmError::Config(m));
        if self.layers == 0 || self.d_model == 0 || self.d_ff == 0 || self.heads == 0 {
            return bad("layer count, widths and heads must be positive".into());
        }
        if self.d_model % 2 != 0 || self.d_ff % 2 != 0 {
            return bad(format!("d_model ({}) and d_ff ({}) must be even", self.d_model, self.d_ff));
        }
        if self.d_model % self.heads != 0 {
            return bad(format!("d_model {} is not divisible by {} heads", self.d_model, self.heads));
        }
        if self.lora_rank == 0 {
            return bad("lora_rank must be at least 1".into());
        }
        if self.vocab < 4 || self.max_seq == 0 {
            return bad("vocabulary needs at least 4 tokens and max_seq must be positive".into());
        }
        if !self.lora_scale.is_finite() {
            return bad("lora_scale must be finite".into());
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimConfig {
    pub lr: f64,
    pub warmup_frac: f64,
    pub weight_decay: f64,
    pub clip_norm: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self { lr: 3e-3, warmup_frac: 0.05, weight_decay: 0.01, clip_norm: 1.0, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Synthetic delayed-copy task parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskConfig {
    /// Tokens to copy; sequences hold `2·content_len + 1` inputs.
    pub content_len: usize,
    /// Probability that an answer token is replaced by a random one.
    pub noise: f64,
    /// Size of the fixed fine-tuning set (train + validation).
    pub finetune_samples: usize,
    pub val_fraction: f64,
}

impl Default for TaskConfig {
    fn default() -> Self {
        Self { content_len: 6, noise: 0.1, finetune_samples: 640, val_fraction: 0.1 }
    }
}

/// Which stabilizer to remove.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Ablation {
    #[default]
    Full,
    NoKd,
    NoRecon,
    /// Abrupt swap: α = 1 from the first step.
    NoResidual,
}

impl Ablation {
    pub const ALL: [Ablation; 4] = [Ablation::Full, Ablation::NoKd, Ablation::NoRecon, Ablation::NoResidual];

    pub fn name(self) -> &'static str {
        match self {
            Ablation::Full => "full",
            Ablation::NoKd => "no-kd",
            Ablation::NoRecon => "no-recon",
            Ablation::NoResidual => "no-residual",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| PhmError::Config(format!("unknown ablation {s:?}")))
    }

    /// The schedule with the removed mechanism switched off.
    pub fn apply(self, schedule: &TrainSchedule) -> TrainSchedule {
        let mut s = schedule.clone();
        match self {
            Ablation::NoKd => s.lambda_max = 0.0,
            Ablation::NoRecon => s.recon_weight = 0.0,
            Ablation::Full | Ablation::NoResidual => {}
        }
        s
    }

    /// Blend used at `step`.
    pub fn alpha(self, schedule: &TrainSchedule, step: usize) -> f64 {
        match self {
            Ablation::NoResidual => 1.0,
            _ => schedule.alpha(step),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    #[serde(default)]
    pub schedule: TrainSchedule,
    #[serde(default)]
    pub optimizer: OptimConfig,
    #[serde(default)]
    pub task: TaskConfig,
    pub batch_size: usize,
    pub steps_pretrain: usize,
    pub steps_a: usize,
    pub steps_b: usize,
    /// Validation cadence in Stage A; the last step is always evaluated.
    pub eval_every: usize,
    #[serde(default)]
    pub light_kd: bool,
    #[serde(default = "default_light_kd_lambda")]
    pub light_kd_lambda: f64,
    #[serde(default)]
    pub train_embeddings: bool,
    #[serde(default)]
    pub ablation: Ablation,
    /// Loss above which a step counts as divergent.
    #[serde(default = "default_divergence")]
    pub divergence_threshold: f64,
}

fn default_light_kd_lambda() -> f64 {
    0.1
}

fn default_divergence() -> f64 {
    1e4
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            schedule: TrainSchedule::default(),
            optimizer: OptimConfig::default(),
            task: TaskConfig::default(),
            batch_size: 16,
            steps_pretrain: 1500,
            steps_a: 2000,
            steps_b: 0,
            eval_every: 100,
            light_kd: false,
            light_kd_lambda: default_light_kd_lambda(),
            train_embeddings: false,
            ablation: Ablation::Full,
            divergence_threshold: default_divergence(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.schedule.validate()?;
        let bad = |m: &str| Err(PhmError::Config(m.to_string()));
        if self.batch_size == 0 || self.eval_every == 0 {
            return bad("batch_size and eval_every must be positive");
        }
        if self.task.content_len == 0 || !(0.0..=1.0).contains(&self.task.noise) {
            return bad("task needs content_len ≥ 1 and noise in [0, 1]");
        }
        if !(self.task.val_fraction > 0.0 && self.task.val_fraction < 1.0) {
            return bad("val_fraction must lie in (0, 1)");
        }
        if !(self.optimizer.lr > 0.0) || !(0.0..1.0).contains(&self.optimizer.warmup_frac) {
            return bad("lr must be positive and warmup_frac in [0, 1)");
        }
        if !(0.0..=1.0).contains(&self.light_kd_lambda) {
            return bad("light_kd_lambda must lie in [0, 1]");
        }
        Ok(())
    }
}

/// Everything `train` needs besides the plan.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    #[serde(default)]
    pub model: ToyModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
}
