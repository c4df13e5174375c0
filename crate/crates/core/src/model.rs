//! Reader configuration and parameter container.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::answer::HeadParams;
use crate::checkpoint::{Checkpoint, CheckpointError};
use crate::chunking::{
    validate_actions, ChunkingError, PolicyParams, RecurrenceMode, RecurrenceParams, ScorerParams,
};
use crate::encoder::{EncoderDims, EncoderParams};
use crate::tensor::ParamStore;

/// Which reader is trained and evaluated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mode {
    /// Fixed stride, independent segments, max-pooled answers.
    #[serde(rename = "baseline")]
    Baseline,
    /// Fixed stride with recurrence and the chunking scorer.
    #[serde(rename = "rcm-no-rl")]
    NoRl,
    /// Learned stride policy with gated recurrence.
    #[serde(rename = "rcm-gated")]
    RcmGated,
    /// Learned stride policy with LSTM recurrence.
    #[serde(rename = "rcm-lstm")]
    RcmLstm,
}

impl Mode {
    pub const ALL: [Mode; 4] = [Mode::Baseline, Mode::NoRl, Mode::RcmGated, Mode::RcmLstm];

    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Baseline => "baseline",
            Mode::NoRl => "rcm-no-rl",
            Mode::RcmGated => "rcm-gated",
            Mode::RcmLstm => "rcm-lstm",
        }
    }

    pub fn uses_policy(self) -> bool {
        matches!(self, Mode::RcmGated | Mode::RcmLstm)
    }

    pub fn uses_recurrence(self) -> bool {
        self != Mode::Baseline
    }

    /// Recurrence implied by the mode; `rcm-no-rl` uses the configured one.
    pub fn recurrence(self, configured: RecurrenceMode) -> Option<RecurrenceMode> {
        match self {
            Mode::Baseline => None,
            Mode::NoRl => Some(configured),
            Mode::RcmGated => Some(RecurrenceMode::Gated),
            Mode::RcmLstm => Some(RecurrenceMode::Lstm),
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Mode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| {
                let names: Vec<_> = Mode::ALL.iter().map(|m| m.as_str()).collect();
                format!("unknown mode `{s}`; expected one of: {}", names.join(", "))
            })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub vocab: usize,
    pub d_model: usize,
    pub layers: usize,
    pub heads: usize,
    pub d_ff: usize,
    pub max_seq_len: usize,
    pub question_budget: usize,
    pub recurrence: RecurrenceMode,
    pub actions: Vec<i64>,
    /// Stride used by the fixed-stride readers.
    pub stride: i64,
    pub segments: usize,
    pub max_answer_len: usize,
}

/// All trainable parameters of one reader.
#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub mode: Mode,
    pub store: ParamStore,
    pub encoder: EncoderParams,
    pub heads: HeadParams,
    pub recurrence: Option<RecurrenceParams>,
    pub scorer: Option<ScorerParams>,
    pub policy: Option<PolicyParams>,
}

impl Model {
    /// Xavier-initialised reader (the stride policy starts uniform);
    /// deterministic in `seed`.
    pub fn new(config: ModelConfig, mode: Mode, seed: u64) -> Result<Self, ChunkingError> {
        if mode.uses_policy() {
            validate_actions(&config.actions)?;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let dims = EncoderDims {
            vocab: config.vocab,
            max_seq_len: config.max_seq_len,
            d_model: config.d_model,
            layers: config.layers,
            heads: config.heads,
            d_ff: config.d_ff,
        };
        let encoder = EncoderParams::new(&mut store, dims, &mut rng);
        let heads = HeadParams::new(&mut store, config.d_model, &mut rng);
        let recurrence = mode
            .recurrence(config.recurrence)
            .map(|r| RecurrenceParams::new(&mut store, r, config.d_model, &mut rng));
        let scorer = mode
            .uses_recurrence()
            .then(|| ScorerParams::new(&mut store, config.d_model, &mut rng));
        let policy = if mode.uses_policy() {
            Some(PolicyParams::new(&mut store, config.d_model, config.actions.clone())?)
        } else {
            None
        };
        Ok(Self {
            config,
            mode,
            store,
            encoder,
            heads,
            recurrence,
            scorer,
            policy,
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let mut c = Checkpoint::from_store(&self.store);
        c.meta.insert("mode".into(), self.mode.to_string());
        c.meta.insert("d_model".into(), self.config.d_model.to_string());
        c
    }

    /// Loads parameters; fails on any missing tensor or shape mismatch.
    pub fn restore(&mut self, ckpt: &Checkpoint) -> Result<(), CheckpointError> {
        if let Some(d) = ckpt.meta.get("d_model") {
            if d != &self.config.d_model.to_string() {
                return Err(CheckpointError::ShapeMismatch {
                    name: "d_model".into(),
                    expected: vec![self.config.d_model],
                    found: vec![d.parse().unwrap_or(0)],
                });
            }
        }
        ckpt.restore_into(&mut self.store)
    }
}

#[cfg(test)]
pub(crate) fn tiny_config() -> ModelConfig {
    ModelConfig {
        vocab: 30,
        d_model: 8,
        layers: 1,
        heads: 2,
        d_ff: 12,
        max_seq_len: 14,
        question_budget: 4,
        recurrence: RecurrenceMode::Gated,
        actions: vec![-2, 2, 4, 8],
        stride: 4,
        segments: 3,
        max_answer_len: 5,
    }
}
