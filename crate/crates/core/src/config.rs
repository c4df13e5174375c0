//! Flat run configuration shared by every command.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::chunking::RecurrenceMode;
use crate::data::SynthConfig;
use crate::model::{Mode, ModelConfig};
use crate::trainer::TrainConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("reading {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("config: {0}")]
    Parse(String),
}

/// Every tunable of a run, as flat `key = value` pairs. Unknown keys are
/// rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    // Synthetic data.
    pub vocab_size: usize,
    pub doc_len_min: usize,
    pub doc_len_max: usize,
    pub question_len: usize,
    pub answer_len_min: usize,
    pub answer_len_max: usize,
    pub answer_start_min: usize,
    pub answer_start_max: usize,
    pub distractor_rate: f64,
    pub cue_span: usize,
    pub cue_rate: f64,
    pub unanswerable_fraction: f64,
    pub count: usize,
    pub data_seed: u64,

    // Reader.
    pub mode: Mode,
    pub d_model: usize,
    pub layers: usize,
    pub heads: usize,
    pub d_ff: usize,
    pub max_seq_len: usize,
    pub question_budget: usize,
    pub recurrence: RecurrenceMode,
    pub actions: Vec<i64>,
    pub stride: i64,
    pub segments: usize,
    pub max_answer_len: usize,

    // Optimisation.
    pub seed: u64,
    pub lr: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
    pub batch_size: usize,
    pub clip_norm: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Steps before the stride policy starts learning.
    pub policy_delay_steps: usize,
    /// Save a resumable checkpoint every this many steps; 0 saves only at the end.
    pub checkpoint_every: usize,

    // Analysis.
    pub bucket_width: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let s = SynthConfig::default();
        let t = TrainConfig::default();
        Self {
            vocab_size: s.vocab_size,
            doc_len_min: s.doc_len_min,
            doc_len_max: s.doc_len_max,
            question_len: s.question_len,
            answer_len_min: s.answer_len_min,
            answer_len_max: s.answer_len_max,
            answer_start_min: s.answer_start_min,
            answer_start_max: s.answer_start_max,
            distractor_rate: s.distractor_rate,
            cue_span: s.cue_span,
            cue_rate: s.cue_rate,
            unanswerable_fraction: s.unanswerable_fraction,
            count: s.count,
            data_seed: s.seed,
            mode: Mode::RcmGated,
            d_model: 64,
            layers: 2,
            heads: 2,
            d_ff: 128,
            max_seq_len: 48,
            question_budget: 8,
            recurrence: RecurrenceMode::Gated,
            actions: vec![-8, 8, 16, 32, 64],
            stride: 32,
            segments: 3,
            max_answer_len: crate::answer::DEFAULT_MAX_ANSWER_LEN,
            seed: t.seed,
            lr: t.peak_lr,
            warmup_steps: t.warmup_steps,
            total_steps: t.total_steps,
            batch_size: t.batch_size,
            clip_norm: t.clip_norm,
            beta1: t.beta1,
            beta2: t.beta2,
            adam_eps: t.eps,
            policy_delay_steps: t.policy_delay_steps,
            checkpoint_every: 0,
            bucket_width: 16,
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        toml::from_str(text).map_err(|e| ConfigError::Parse(e.message().to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::parse(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("flat config serialises")
    }

    pub fn synth(&self) -> SynthConfig {
        SynthConfig {
            vocab_size: self.vocab_size,
            doc_len_min: self.doc_len_min,
            doc_len_max: self.doc_len_max,
            question_len: self.question_len,
            answer_len_min: self.answer_len_min,
            answer_len_max: self.answer_len_max,
            answer_start_min: self.answer_start_min,
            answer_start_max: self.answer_start_max,
            distractor_rate: self.distractor_rate,
            cue_span: self.cue_span,
            cue_rate: self.cue_rate,
            unanswerable_fraction: self.unanswerable_fraction,
            count: self.count,
            seed: self.data_seed,
        }
    }

    pub fn model(&self) -> ModelConfig {
        ModelConfig {
            vocab: self.synth().vocab().len(),
            d_model: self.d_model,
            layers: self.layers,
            heads: self.heads,
            d_ff: self.d_ff,
            max_seq_len: self.max_seq_len,
            question_budget: self.question_budget,
            recurrence: self.recurrence,
            actions: self.actions.clone(),
            stride: self.stride,
            segments: self.segments,
            max_answer_len: self.max_answer_len,
        }
    }

    pub fn train(&self) -> TrainConfig {
        TrainConfig {
            peak_lr: self.lr,
            warmup_steps: self.warmup_steps,
            total_steps: self.total_steps,
            batch_size: self.batch_size,
            segments: self.segments,
            seed: self.seed,
            clip_norm: self.clip_norm,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.adam_eps,
            policy_delay_steps: self.policy_delay_steps,
        }
    }
}
