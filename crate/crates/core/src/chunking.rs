//! Recurrence across segments, the chunking scorer, the stride policy and the
//! recursive reward.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::answer::AnswerPrediction;
use crate::encoder::SegmentInput;
use crate::tensor::{Graph, ParamId, ParamStore, Result as TResult, Tensor, Var};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ChunkingError {
    #[error("length mismatch: {0} containment scores vs {1} rewards")]
    LengthMismatch(usize, usize),
    #[error("segment marked as containing the answer but has no local gold span")]
    MissingGold,
    #[error("invalid action space: {0}")]
    ActionSpace(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RecurrenceMode {
    Gated,
    Lstm,
}

/// Parameters of the cross-segment recurrence.
#[derive(Debug, Clone)]
pub enum RecurrenceParams {
    /// `[2d, 2]` projection of `[v_c, ṽ_{c-1}]` to the two mixing logits.
    Gated { w: ParamId, b: ParamId },
    /// `[2d, 4d]` weights on `[v_c, h_{c-1}]`, gate order input, forget,
    /// candidate, output.
    Lstm { w: ParamId, b: ParamId },
}

/// Recurrent state carried from one segment to the next.
#[derive(Debug, Clone, Copy)]
pub enum RecurrentState {
    Gated { v: Var },
    Lstm { h: Var, c: Var },
}

impl RecurrentState {
    /// The enriched representation ṽ.
    pub fn output(&self) -> Var {
        match *self {
            RecurrentState::Gated { v } => v,
            RecurrentState::Lstm { h, .. } => h,
        }
    }
}

impl RecurrenceParams {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        mode: RecurrenceMode,
        d: usize,
        rng: &mut R,
    ) -> Self {
        match mode {
            RecurrenceMode::Gated => RecurrenceParams::Gated {
                w: store.add("rec.gated_w", Tensor::xavier(&[2 * d, 2], rng)),
                b: store.add("rec.gated_b", Tensor::zeros(&[1, 2])),
            },
            RecurrenceMode::Lstm => RecurrenceParams::Lstm {
                w: store.add("rec.lstm_w", Tensor::xavier(&[2 * d, 4 * d], rng)),
                b: store.add("rec.lstm_b", Tensor::zeros(&[1, 4 * d])),
            },
        }
    }

    pub fn mode(&self) -> RecurrenceMode {
        match self {
            RecurrenceParams::Gated { .. } => RecurrenceMode::Gated,
            RecurrenceParams::Lstm { .. } => RecurrenceMode::Lstm,
        }
    }

    /// Zero initial state for a `d`-dimensional representation.
    pub fn initial(&self, g: &mut Graph, d: usize) -> RecurrentState {
        let zero = vec![0.0; d];
        match self {
            RecurrenceParams::Gated { .. } => RecurrentState::Gated {
                v: g.input_row(&zero),
            },
            RecurrenceParams::Lstm { .. } => RecurrentState::Lstm {
                h: g.input_row(&zero),
                c: g.input_row(&zero),
            },
        }
    }

    pub fn step(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        v: Var,
        prev: RecurrentState,
    ) -> TResult<RecurrentState> {
        match (self, prev) {
            (RecurrenceParams::Gated { w, b }, RecurrentState::Gated { v: prev }) => {
                let w = g.param(store, *w);
                let b = g.param(store, *b);
                Ok(RecurrentState::Gated {
                    v: recur_gated(g, v, prev, w, b)?,
                })
            }
            (RecurrenceParams::Lstm { w, b }, RecurrentState::Lstm { h, c }) => {
                let w = g.param(store, *w);
                let b = g.param(store, *b);
                let (h, c) = recur_lstm(g, v, h, c, w, b)?;
                Ok(RecurrentState::Lstm { h, c })
            }
            _ => panic!("recurrent state does not match recurrence mode"),
        }
    }
}

/// `ṽ = α·v + β·prev` with `(α, β) = softmax([v, prev]·w + b)`.
pub fn recur_gated(g: &mut Graph, v: Var, prev: Var, w: Var, b: Var) -> TResult<Var> {
    if g.shape(v) != g.shape(prev) {
        return Err(crate::tensor::TensorError::ShapeMismatch {
            op: "recur_gated",
            lhs: g.shape(v).to_vec(),
            rhs: g.shape(prev).to_vec(),
        });
    }
    let cat = g.concat_cols(&[v, prev])?;
    let logits = g.matmul(cat, w)?;
    let logits = g.add_row(logits, b)?;
    let coef = g.softmax_rows(logits);
    let alpha = g.slice_cols(coef, 0, 1)?;
    let beta = g.slice_cols(coef, 1, 1)?;
    let a = g.scale_by(v, alpha)?;
    let bp = g.scale_by(prev, beta)?;
    g.add(a, bp)
}

/// Standard LSTM cell; returns `(h_new, c_new)`.
pub fn recur_lstm(g: &mut Graph, x: Var, h: Var, c: Var, w: Var, b: Var) -> TResult<(Var, Var)> {
    let d = g.shape(h)[1];
    if g.shape(x) != g.shape(h) || g.shape(c) != g.shape(h) {
        return Err(crate::tensor::TensorError::ShapeMismatch {
            op: "recur_lstm",
            lhs: g.shape(x).to_vec(),
            rhs: g.shape(h).to_vec(),
        });
    }
    let cat = g.concat_cols(&[x, h])?;
    let z = g.matmul(cat, w)?;
    let z = g.add_row(z, b)?;
    let zi = g.slice_cols(z, 0, d)?;
    let zf = g.slice_cols(z, d, d)?;
    let zg = g.slice_cols(z, 2 * d, d)?;
    let zo = g.slice_cols(z, 3 * d, d)?;
    let i = g.sigmoid(zi);
    let f = g.sigmoid(zf);
    let cand = g.tanh(zg);
    let o = g.sigmoid(zo);
    let keep = g.mul(f, c)?;
    let write = g.mul(i, cand)?;
    let c_new = g.add(keep, write)?;
    let tc = g.tanh(c_new);
    let h_new = g.mul(o, tc)?;
    Ok((h_new, c_new))
}

/// Chunking scorer `q = σ(W_c·ṽ + b_c)`.
#[derive(Debug, Clone)]
pub struct ScorerParams {
    pub w: ParamId,
    pub b: ParamId,
}

impl ScorerParams {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, d: usize, rng: &mut R) -> Self {
        Self {
            w: store.add("scorer.w", Tensor::xavier(&[1, d], rng)),
            b: store.add("scorer.b", Tensor::zeros(&[1, 1])),
        }
    }

    /// Returns the logit node; `q` is its sigmoid.
    pub fn logit(&self, g: &mut Graph, store: &ParamStore, v: Var) -> TResult<Var> {
        let w = g.param(store, self.w);
        let b = g.param(store, self.b);
        let z = g.matmul_t(v, w)?;
        g.add(z, b)
    }
}

pub fn chunk_score(g: &mut Graph, store: &ParamStore, scorer: &ScorerParams, v: Var) -> TResult<f64> {
    let z = scorer.logit(g, store, v)?;
    Ok(crate::tensor::sigmoid(g.scalar(z)))
}

/// Stride policy `softmax(W_a·ṽ + b_a)` over a signed action space.
#[derive(Debug, Clone)]
pub struct PolicyParams {
    pub w: ParamId,
    pub b: ParamId,
    pub actions: Vec<i64>,
}

impl PolicyParams {
    /// Zero-initialised, so reading starts from the uniform policy.
    pub fn new(store: &mut ParamStore, d: usize, actions: Vec<i64>) -> Result<Self, ChunkingError> {
        validate_actions(&actions)?;
        Ok(Self {
            w: store.add("policy.w", Tensor::zeros(&[actions.len(), d])),
            b: store.add("policy.b", Tensor::zeros(&[1, actions.len()])),
            actions,
        })
    }

    /// Log-probabilities over the action space as a `[1, |A|]` node.
    pub fn log_probs(&self, g: &mut Graph, store: &ParamStore, v: Var) -> TResult<Var> {
        let w = g.param(store, self.w);
        let b = g.param(store, self.b);
        let logits = g.matmul_t(v, w)?;
        let logits = g.add_row(logits, b)?;
        g.log_softmax_rows(logits, None)
    }
}

pub fn validate_actions(actions: &[i64]) -> Result<(), ChunkingError> {
    if actions.len() < 2 {
        return Err(ChunkingError::ActionSpace("need at least two actions".into()));
    }
    if !actions.iter().any(|&a| a > 0) {
        return Err(ChunkingError::ActionSpace("need a forward stride".into()));
    }
    let mut sorted = actions.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    if sorted.len() != actions.len() {
        return Err(ChunkingError::ActionSpace("strides must be distinct".into()));
    }
    Ok(())
}

/// Policy distribution as plain probabilities.
pub fn policy_dist(g: &mut Graph, store: &ParamStore, policy: &PolicyParams, v: Var) -> TResult<Vec<f64>> {
    let lp = policy.log_probs(g, store, v)?;
    Ok(g.value(lp).iter().map(|x| x.exp()).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ActionMode {
    Sample,
    Argmax,
}

/// Picks an action index; argmax ties go to the smallest index.
pub fn choose_action<R: Rng + ?Sized>(dist: &[f64], mode: ActionMode, rng: &mut R) -> (usize, f64) {
    let idx = match mode {
        ActionMode::Argmax => argmax_first(dist),
        ActionMode::Sample => {
            let u: f64 = rng.gen();
            let mut acc = 0.0;
            let mut pick = None;
            for (i, &p) in dist.iter().enumerate() {
                acc += p;
                if u < acc {
                    pick = Some(i);
                    break;
                }
            }
            // Rounding can leave `acc` just below 1; fall back to the last
            // action with non-zero mass.
            pick.unwrap_or_else(|| dist.iter().rposition(|&p| p > 0.0).unwrap_or(0))
        }
    };
    (idx, dist[idx])
}

pub fn argmax_first(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate().skip(1) {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// `R_c = q_c·r_c + (1 − q_c)·R_{c+1}` with `R_{C+1} = 0`.
pub fn accumulated_rewards(q: &[f64], r: &[f64]) -> Result<Vec<f64>, ChunkingError> {
    if q.len() != r.len() {
        return Err(ChunkingError::LengthMismatch(q.len(), r.len()));
    }
    let mut out = vec![0.0; q.len()];
    let mut next = 0.0;
    for c in (0..q.len()).rev() {
        next = q[c] * r[c] + (1.0 - q[c]) * next;
        out[c] = next;
    }
    Ok(out)
}

/// Policy-gradient weight of the move taken after each segment.
///
/// The move after segment `c` produces segment `c + 1`, so it is credited with
/// `R_{c+1}` scaled by `Π_{k≤c}(1 − q_k)`, the probability that reading has
/// not already ended with an answer. Summing `log π(a_c)·credit_c` then gives
/// an unbiased estimate of the gradient of `E[R_1]`. The last entry is 0.
pub fn action_credits(q: &[f64], returns: &[f64]) -> Result<Vec<f64>, ChunkingError> {
    if q.len() != returns.len() {
        return Err(ChunkingError::LengthMismatch(q.len(), returns.len()));
    }
    let mut reach = 1.0;
    let mut out = vec![0.0; q.len()];
    for c in 0..q.len().saturating_sub(1) {
        reach *= 1.0 - q[c];
        out[c] = reach * returns[c + 1];
    }
    Ok(out)
}

/// Stride action taken after a segment.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TakenAction {
    pub index: usize,
    pub stride: i64,
    pub prob: f64,
}

/// Everything recorded about one read segment.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentState {
    pub input: SegmentInput,
    pub v: Vec<f64>,
    pub v_tilde: Vec<f64>,
    /// Containment probability; absent for the baseline reader.
    pub q: Option<f64>,
    /// Distributions over input positions (zero outside the answer mask).
    pub start_probs: Vec<f64>,
    pub end_probs: Vec<f64>,
    /// Gold containment flag `y_c`.
    pub contains: bool,
    /// Gold `(i*, j*)` in input coordinates when `contains`.
    pub gold_local: Option<(usize, usize)>,
    pub policy_probs: Option<Vec<f64>>,
    pub action: Option<TakenAction>,
}

impl SegmentState {
    pub fn doc_start(&self) -> usize {
        self.input.doc_start
    }

    pub fn doc_len(&self) -> usize {
        self.input.doc_len
    }
}

/// `r_c = p_start[i*]·p_end[j*]` if the segment contains the answer, else 0.
pub fn segment_reward(state: &SegmentState) -> Result<f64, ChunkingError> {
    if !state.contains {
        return Ok(0.0);
    }
    let (i, j) = state.gold_local.ok_or(ChunkingError::MissingGold)?;
    Ok(state.start_probs[i] * state.end_probs[j])
}

/// One full read of one document.
#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub segments: Vec<SegmentState>,
    pub rewards: Vec<f64>,
    pub returns: Vec<f64>,
    /// Weight of each segment's move in the policy loss; see [`action_credits`].
    pub credits: Vec<f64>,
    pub prediction: Option<AnswerPrediction>,
}

impl Episode {
    pub fn len(&self) -> usize {
        self.segments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.segments.is_empty()
    }
}
