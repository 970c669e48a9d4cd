//! JSON run configuration. Every field is optional; unknown keys are errors.

use serde::{Deserialize, Serialize};
use sparsek_core::attention::KeyMode;
use sparsek_core::selection::{NormMode, SelectionMode, SlopeOrder};
use sparsek_core::trainer::tasks::PASSKEY_VOCAB;
use sparsek_core::trainer::{AttnKind, RecallTask, ToyModelConfig, TrainHyper};

use crate::error::{CliError, CliResult};

#[derive(Serialize, Deserialize)]
#[serde(remote = "AttnKind", rename_all = "snake_case")]
enum AttnKindDef {
    Full,
    Sw,
    #[serde(rename = "sparsek_sw")]
    SparseKSw,
    #[serde(rename = "sparsek_linear_sw")]
    SparseKLinearSw,
}

#[derive(Serialize, Deserialize)]
#[serde(remote = "KeyMode", rename_all = "snake_case")]
enum KeyModeDef {
    Hard,
    Soft,
}

#[derive(Serialize, Deserialize)]
#[serde(remote = "SelectionMode", rename_all = "snake_case")]
enum SelectionModeDef {
    Hard,
    Soft,
    StraightThrough,
}

#[derive(Serialize, Deserialize)]
#[serde(remote = "NormMode", rename_all = "snake_case")]
enum NormModeDef {
    None,
    #[serde(rename = "timestep")]
    TimestepNorm,
}

#[derive(Serialize, Deserialize)]
#[serde(remote = "SlopeOrder", rename_all = "snake_case")]
enum SlopeOrderDef {
    NormThenSlope,
    SlopeThenNorm,
}

/// Where training sequences come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    /// Byte-level text from `--corpus`.
    Corpus,
    /// Synthetic long-range recall language modeling.
    Recall,
    /// Passkey retrieval.
    Passkey,
    /// `0, 1, ..., symbols - 1` repeated.
    Repeating,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TaskConfig {
    pub kind: TaskKind,
    /// Fraction of every corpus document held out for evaluation.
    pub held_out: f64,
    pub recall_queries: usize,
    /// Loss weight of the passkey answer position.
    pub passkey_answer_weight: f64,
    /// Training passkeys sit between this distance and the end of the context.
    pub passkey_min_distance: usize,
    pub repeating_symbols: usize,
}

impl Default for TaskConfig {
    fn default() -> Self {
        Self {
            kind: TaskKind::Corpus,
            held_out: 0.1,
            recall_queries: 4,
            passkey_answer_weight: 8.0,
            passkey_min_distance: 1,
            repeating_symbols: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Defaults to the task's vocabulary; must match it when given.
    pub vocab: Option<usize>,
    pub d_model: usize,
    pub layers: usize,
    pub heads: usize,
    pub context: usize,
    /// Defaults to `4 * d_model`.
    pub d_ff: Option<usize>,
    #[serde(with = "AttnKindDef")]
    pub attention: AttnKind,
    pub k: f64,
    pub window: usize,
    #[serde(with = "KeyModeDef")]
    pub key_mode: KeyMode,
    #[serde(with = "SelectionModeDef")]
    pub value_mode: SelectionMode,
    pub group_size: usize,
    pub mimic_init: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab: None,
            d_model: 32,
            layers: 2,
            heads: 2,
            context: 64,
            d_ff: None,
            attention: AttnKind::SparseKSw,
            k: 8.0,
            window: 8,
            key_mode: KeyMode::Hard,
            value_mode: SelectionMode::Soft,
            group_size: 128,
            mimic_init: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScoringConfig {
    pub slope_eps: f64,
    pub use_slope: bool,
    #[serde(with = "NormModeDef")]
    pub norm: NormMode,
    #[serde(with = "SlopeOrderDef")]
    pub slope_order: SlopeOrder,
    pub norm_eps: f64,
}

impl Default for ScoringConfig {
    fn default() -> Self {
        Self {
            slope_eps: 0.01,
            use_slope: true,
            norm: NormMode::TimestepNorm,
            slope_order: SlopeOrder::NormThenSlope,
            norm_eps: 1e-5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: u64,
    pub batch_size: usize,
    pub lr: f64,
    pub min_lr_ratio: f64,
    pub warmup: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub clip: f64,
    /// Truncated backpropagation chunk length; `null` backpropagates through
    /// the whole sequence.
    pub chunk_len: Option<usize>,
    /// Also write a checkpoint every this many steps.
    pub checkpoint_every: Option<u64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let h = TrainHyper::default();
        Self {
            steps: 1000,
            batch_size: h.batch_size,
            lr: h.lr,
            min_lr_ratio: h.min_lr_ratio,
            warmup: h.warmup,
            beta1: h.beta1,
            beta2: h.beta2,
            eps: h.eps,
            weight_decay: h.weight_decay,
            clip: h.clip,
            chunk_len: h.chunk_len,
            checkpoint_every: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub task: TaskConfig,
    pub model: ModelConfig,
    pub scoring: ScoringConfig,
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn from_json(s: &str) -> CliResult<Self> {
        let cfg: RunConfig = serde_json::from_str(s).map_err(|e| CliError::Usage(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn task_vocab(&self) -> usize {
        match self.task.kind {
            TaskKind::Corpus => 256,
            TaskKind::Recall => RecallTask::VOCAB,
            TaskKind::Passkey => PASSKEY_VOCAB,
            TaskKind::Repeating => self.task.repeating_symbols,
        }
    }

    pub fn validate(&self) -> CliResult<()> {
        if let Some(v) = self.model.vocab {
            if v != self.task_vocab() {
                return Err(CliError::Usage(format!(
                    "config: model.vocab is {v} but the {:?} task uses {}",
                    self.task.kind,
                    self.task_vocab()
                )));
            }
        }
        if !(0.0..1.0).contains(&self.task.held_out) {
            return Err(CliError::Usage("config: task.held_out must lie in [0, 1)".into()));
        }
        if self.task.kind == TaskKind::Repeating && self.task.repeating_symbols == 0 {
            return Err(CliError::Usage(
                "config: task.repeating_symbols must be positive".into(),
            ));
        }
        if !(self.task.passkey_answer_weight > 0.0) {
            return Err(CliError::Usage(
                "config: task.passkey_answer_weight must be positive".into(),
            ));
        }
        if self.train.checkpoint_every == Some(0) {
            return Err(CliError::Usage(
                "config: train.checkpoint_every must be positive".into(),
            ));
        }
        self.model_config().validate()?;
        self.hyper().validate()?;
        Ok(())
    }

    pub fn model_config(&self) -> ToyModelConfig {
        let m = &self.model;
        let mut c = ToyModelConfig::new(self.task_vocab(), m.d_model, m.layers, m.heads, m.context, m.attention);
        if let Some(f) = m.d_ff {
            c.d_ff = f;
        }
        c.k = m.k;
        c.window = m.window;
        c.key_mode = m.key_mode;
        c.value_mode = m.value_mode;
        c.group_size = m.group_size;
        c.mimic_init = m.mimic_init;
        c.slope_eps = self.scoring.slope_eps;
        c.use_slope = self.scoring.use_slope;
        c.norm_mode = self.scoring.norm;
        c.slope_order = self.scoring.slope_order;
        c.norm_eps = self.scoring.norm_eps;
        c.seed = self.seed;
        c
    }

    pub fn hyper(&self) -> TrainHyper {
        let t = &self.train;
        TrainHyper {
            steps: t.steps,
            batch_size: t.batch_size,
            lr: t.lr,
            min_lr_ratio: t.min_lr_ratio,
            warmup: t.warmup,
            beta1: t.beta1,
            beta2: t.beta2,
            eps: t.eps,
            weight_decay: t.weight_decay,
            clip: t.clip,
            chunk_len: t.chunk_len,
        }
    }
}
