//! Span heads, answer/scorer losses, and cross-segment answer selection.

use std::collections::VecDeque;
use std::rc::Rc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::chunking::{Episode, SegmentState};
use crate::tensor::{Graph, ParamId, ParamStore, Result as TResult, Tensor, Var};

pub const DEFAULT_MAX_ANSWER_LEN: usize = 30;

/// Start and end scoring vectors `w_s`, `w_e`.
#[derive(Debug, Clone)]
pub struct HeadParams {
    pub w_start: ParamId,
    pub w_end: ParamId,
}

impl HeadParams {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, d: usize, rng: &mut R) -> Self {
        Self {
            w_start: store.add("head.w_start", Tensor::xavier(&[1, d], rng)),
            w_end: store.add("head.w_end", Tensor::xavier(&[1, d], rng)),
        }
    }
}

/// Log start/end distributions `[1, n]` over the unmasked positions of `h`.
pub fn span_distributions(
    g: &mut Graph,
    store: &ParamStore,
    heads: &HeadParams,
    h: Var,
    mask: &[bool],
) -> TResult<(Var, Var)> {
    let mask: Rc<[bool]> = mask.into();
    let ws = g.param(store, heads.w_start);
    let we = g.param(store, heads.w_end);
    let ls = g.matmul_t(ws, h)?;
    let le = g.matmul_t(we, h)?;
    let ps = g.log_softmax_rows(ls, Some(mask.clone()))?;
    let pe = g.log_softmax_rows(le, Some(mask))?;
    Ok((ps, pe))
}

/// Answer chosen across the segments of an episode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnswerPrediction {
    pub segment: usize,
    /// Input-layout indices within the winning segment.
    pub start: usize,
    pub end: usize,
    /// Inclusive document span; `None` means the `[UNK]` answer was chosen.
    pub doc_span: Option<(usize, usize)>,
    pub score: f64,
}

impl AnswerPrediction {
    pub fn is_unanswerable(&self) -> bool {
        self.doc_span.is_none()
    }
}

/// Best span by `p_start[i]·p_end[j]·q_c`.
pub fn decode_best_span(episode: &Episode, max_answer_len: usize) -> Option<AnswerPrediction> {
    decode(episode, max_answer_len, |s| s.q.unwrap_or(1.0))
}

/// Baseline max-pooling: best span by `p_start[i]·p_end[j]` alone.
pub fn decode_maxpool(episode: &Episode, max_answer_len: usize) -> Option<AnswerPrediction> {
    decode(episode, max_answer_len, |_| 1.0)
}

/// Linear-time search per segment: for every end `j` a monotone deque keeps
/// the best start in `[j - max_len + 1, j]`. Ties resolve to the earliest
/// segment, then the smaller start, then the smaller end.
fn decode(
    episode: &Episode,
    max_answer_len: usize,
    weight: impl Fn(&SegmentState) -> f64,
) -> Option<AnswerPrediction> {
    let max_len = max_answer_len.max(1);
    let mut best: Option<AnswerPrediction> = None;
    let mut consider = |cand: AnswerPrediction| {
        let better = match &best {
            None => true,
            Some(b) => cand.score > b.score,
        };
        if better {
            best = Some(cand);
        }
    };
    for (c, seg) in episode.segments.iter().enumerate() {
        let w = weight(seg);
        let ps = &seg.start_probs;
        let pe = &seg.end_probs;
        let off = seg.input.doc_offset();
        let n = seg.input.doc_len;

        // Candidates are visited in (start, end) order within a segment so a
        // strict comparison keeps the lexicographically smallest winner.
        let mut per_end: Vec<(usize, f64)> = Vec::with_capacity(n);
        let mut dq: VecDeque<usize> = VecDeque::new();
        for j in off..off + n {
            while let Some(&back) = dq.back() {
                if ps[back] < ps[j] {
                    dq.pop_back();
                } else {
                    break;
                }
            }
            dq.push_back(j);
            while let Some(&front) = dq.front() {
                if front + max_len <= j {
                    dq.pop_front();
                } else {
                    break;
                }
            }
            let i = dq[0];
            per_end.push((i, ps[i] * pe[j] * w));
        }
        let mut seg_best: Option<(usize, usize, f64)> = None;
        for (k, &(i, score)) in per_end.iter().enumerate() {
            let j = off + k;
            let take = match seg_best {
                None => true,
                Some((bi, bj, bs)) => score > bs || (score == bs && (i, j) < (bi, bj)),
            };
            if take {
                seg_best = Some((i, j, score));
            }
        }
        if let Some((i, j, score)) = seg_best {
            consider(AnswerPrediction {
                segment: c,
                start: i,
                end: j,
                doc_span: Some((
                    seg.input.position_map[i].expect("document position"),
                    seg.input.position_map[j].expect("document position"),
                )),
                score,
            });
        }
        let u = seg.input.unk_index();
        consider(AnswerPrediction {
            segment: c,
            start: u,
            end: u,
            doc_span: None,
            score: ps[u] * pe[u] * w,
        });
    }
    best
}

/// `-Σ log p_start[i*] - Σ log p_end[j*]` over segments containing the answer.
pub fn answer_loss(episodes: &[Episode]) -> f64 {
    let mut total = 0.0;
    for ep in episodes {
        let mut labeled = false;
        for s in &ep.segments {
            if let (true, Some((i, j))) = (s.contains, s.gold_local) {
                total -= s.start_probs[i].ln() + s.end_probs[j].ln();
                labeled = true;
            }
        }
        if !labeled {
            log::warn!("episode has no segment containing the answer; no answer loss");
        }
    }
    total
}

/// Binary cross-entropy of `q_c` against `y_c`, summed over all segments.
pub fn scorer_loss(episodes: &[Episode]) -> f64 {
    episodes
        .iter()
        .flat_map(|e| &e.segments)
        .filter_map(|s| s.q.map(|q| (q, s.contains)))
        .map(|(q, y)| if y { -q.ln() } else { -(1.0 - q).ln() })
        .sum()
}
