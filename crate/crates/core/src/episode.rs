//! Reading one document: window movement, gold localisation and rollouts.

use rand::Rng;
use thiserror::Error;

use crate::answer::{decode_best_span, decode_maxpool, span_distributions};
use crate::chunking::{
    accumulated_rewards, action_credits, choose_action, segment_reward, ActionMode, ChunkingError, Episode,
    SegmentState, TakenAction,
};
use crate::data::QAExample;
use crate::encoder::{build_input, window_len, InputError, SegmentInput};
use crate::model::{Mode, Model};
use crate::tensor::{sigmoid, Graph, TensorError, Var};

#[derive(Debug, Error)]
pub enum EpisodeError {
    #[error(transparent)]
    Input(#[from] InputError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Chunking(#[from] ChunkingError),
    #[error("segment count must be at least 1")]
    NoSegments,
    #[error("empty document")]
    EmptyDocument,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RolloutMode {
    /// Sample stride actions and compute rewards.
    Train,
    /// Take the most probable stride action.
    Test,
}

/// `clamp(doc_start + action, 0, max(0, doc_len - window_len))`.
pub fn apply_action(doc_start: usize, action: i64, window_len: usize, doc_len: usize) -> usize {
    let hi = doc_len.saturating_sub(window_len) as i64;
    (doc_start as i64 + action).clamp(0, hi) as usize
}

/// Gold containment flag and local span for one segment.
///
/// Answerable: contained only when the whole span lies inside the window.
/// Unanswerable: always contained, at the `[UNK]` slot.
pub fn localize_gold(input: &SegmentInput, example: &QAExample) -> (bool, Option<(usize, usize)>) {
    match (example.answerable, example.answer) {
        (true, Some((s, e))) => match (input.input_index(s), input.input_index(e)) {
            (Some(i), Some(j)) => (true, Some((i, j))),
            _ => (false, None),
        },
        _ => {
            let u = input.unk_index();
            (true, Some((u, u)))
        }
    }
}

/// Graph handles for one segment, used to build the training loss.
#[derive(Debug, Clone, Copy)]
pub struct SegmentVars {
    pub start_logp: Var,
    pub end_logp: Var,
    pub score_logit: Option<Var>,
    /// Log-probability of the sampled action.
    pub action_logp: Option<Var>,
}

/// An episode together with the graph that produced it.
#[derive(Debug, Clone)]
pub struct Rollout {
    pub episode: Episode,
    pub graph: Graph,
    pub vars: Vec<SegmentVars>,
}

/// Reads `example` for up to `segments` windows.
///
/// The first window starts at document offset 0. With `stride_override` every
/// reader, including policy readers, moves by that stride; otherwise policy
/// readers follow their policy and fixed-stride readers the configured stride.
pub fn rollout<R: Rng + ?Sized>(
    model: &Model,
    example: &QAExample,
    segments: usize,
    mode: RolloutMode,
    stride_override: Option<i64>,
    rng: &mut R,
) -> Result<Rollout, EpisodeError> {
    if segments == 0 {
        return Err(EpisodeError::NoSegments);
    }
    let doc_len = example.doc_tokens.len();
    if doc_len == 0 {
        return Err(EpisodeError::EmptyDocument);
    }
    let cfg = &model.config;
    let wlen = window_len(example.question_tokens.len(), cfg.max_seq_len, cfg.question_budget)
        .ok_or(InputError::NoRoom {
            max_seq_len: cfg.max_seq_len,
            question: example.question_tokens.len().min(cfg.question_budget),
        })?;
    let count = if doc_len <= wlen { 1 } else { segments };
    let store = &model.store;
    let d = cfg.d_model;

    let mut g = Graph::new();
    let mut state = model.recurrence.as_ref().map(|r| r.initial(&mut g, d));
    let mut doc_start = 0usize;
    let mut states = Vec::with_capacity(count);
    let mut vars = Vec::with_capacity(count);

    for c in 0..count {
        let input = build_input(example, doc_start, cfg.max_seq_len, cfg.question_budget)?;
        let enc = model.encoder.encode(&mut g, store, &input)?;
        let (start_logp, end_logp) =
            span_distributions(&mut g, store, &model.heads, enc.h, &input.answer_mask())?;

        let v_tilde = match (&model.recurrence, state) {
            (Some(rec), Some(prev)) => {
                let next = rec.step(&mut g, store, enc.v, prev)?;
                state = Some(next);
                next.output()
            }
            _ => enc.v,
        };
        let score_logit = match &model.scorer {
            Some(s) => Some(s.logit(&mut g, store, v_tilde)?),
            None => None,
        };

        let mut action = None;
        let mut action_logp = None;
        let mut policy_probs = None;
        if c + 1 < count {
            let stride = match (&model.policy, stride_override) {
                (Some(policy), None) => {
                    let lp = policy.log_probs(&mut g, store, v_tilde)?;
                    let probs: Vec<f64> = g.value(lp).iter().map(|x| x.exp()).collect();
                    let am = match mode {
                        RolloutMode::Train => ActionMode::Sample,
                        RolloutMode::Test => ActionMode::Argmax,
                    };
                    let (idx, prob) = choose_action(&probs, am, rng);
                    action_logp = Some(g.pick(lp, idx)?);
                    action = Some(TakenAction {
                        index: idx,
                        stride: policy.actions[idx],
                        prob,
                    });
                    policy_probs = Some(probs);
                    policy.actions[idx]
                }
                (_, forced) => {
                    let s = forced.unwrap_or(cfg.stride);
                    action = Some(TakenAction {
                        index: 0,
                        stride: s,
                        prob: 1.0,
                    });
                    s
                }
            };
            doc_start = apply_action(doc_start, stride, wlen, doc_len);
        }

        let (contains, gold_local) = localize_gold(&input, example);
        let start_probs = g.value(start_logp).iter().map(|x| x.exp()).collect();
        let end_probs = g.value(end_logp).iter().map(|x| x.exp()).collect();
        states.push(SegmentState {
            v: g.value(enc.v).to_vec(),
            v_tilde: g.value(v_tilde).to_vec(),
            q: score_logit.map(|z| sigmoid(g.scalar(z))),
            start_probs,
            end_probs,
            contains,
            gold_local,
            policy_probs,
            action,
            input,
        });
        vars.push(SegmentVars {
            start_logp,
            end_logp,
            score_logit,
            action_logp,
        });
    }

    let mut episode = Episode {
        segments: states,
        rewards: Vec::new(),
        returns: Vec::new(),
        credits: Vec::new(),
        prediction: None,
    };
    if mode == RolloutMode::Train && model.mode.uses_policy() {
        let r = episode
            .segments
            .iter()
            .map(segment_reward)
            .collect::<Result<Vec<_>, _>>()?;
        let q: Vec<f64> = episode.segments.iter().map(|s| s.q.unwrap_or(1.0)).collect();
        episode.returns = accumulated_rewards(&q, &r)?;
        episode.credits = action_credits(&q, &episode.returns)?;
        episode.rewards = r;
    }
    episode.prediction = match model.mode {
        Mode::Baseline => decode_maxpool(&episode, cfg.max_answer_len),
        _ => decode_best_span(&episode, cfg.max_answer_len),
    };
    Ok(Rollout {
        episode,
        graph: g,
        vars,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::tiny_config;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn example(doc_len: usize, answer: Option<(usize, usize)>) -> QAExample {
        QAExample {
            doc_tokens: (0..doc_len).map(|i| 10 + i % 15).collect(),
            question_tokens: vec![7, 8],
            answer,
            reference_answers: if answer.is_some() { vec![vec!["x".into()]] } else { vec![] },
            answerable: answer.is_some(),
        }
    }

    #[test]
    fn apply_action_clamps() {
        assert_eq!(apply_action(0, 128, 192, 1000), 128);
        assert_eq!(apply_action(0, -64, 192, 1000), 0);
        assert_eq!(apply_action(900, 256, 192, 1000), 808);
        assert_eq!(apply_action(0, 16, 192, 100), 0);
    }

    #[test]
    fn localize_examples() {
        let ex = example(400, Some((10, 12)));
        let inp = build_input(&ex, 0, 197, 8).unwrap();
        let (y, local) = localize_gold(&inp, &ex);
        assert!(y);
        let (i, j) = local.unwrap();
        assert_eq!(inp.position_map[i], Some(10));
        assert_eq!(inp.position_map[j], Some(12));

        let inp = build_input(&ex, 11, 197, 8).unwrap();
        assert_eq!(localize_gold(&inp, &ex), (false, None));

        let ex = example(400, None);
        let inp = build_input(&ex, 50, 197, 8).unwrap();
        let u = inp.unk_index();
        assert_eq!(localize_gold(&inp, &ex), (true, Some((u, u))));
    }

    #[test]
    fn short_document_reads_one_segment() {
        let model = Model::new(tiny_config(), Mode::RcmGated, 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let r = rollout(&model, &example(5, Some((1, 2))), 3, RolloutMode::Train, None, &mut rng)
            .unwrap();
        assert_eq!(r.episode.len(), 1);
        assert!(r.episode.segments[0].action.is_none());
    }

    #[test]
    fn long_document_structure() {
        for mode in Mode::ALL {
            let model = Model::new(tiny_config(), mode, 1).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            let ex = example(60, Some((20, 21)));
            let r = rollout(&model, &ex, 3, RolloutMode::Train, None, &mut rng).unwrap();
            let ep = &r.episode;
            assert_eq!(ep.len(), 3);
            assert_eq!(ep.segments[0].doc_start(), 0);
            assert_eq!(ep.segments.iter().filter(|s| s.action.is_some()).count(), 2);
            for s in &ep.segments {
                assert!(s.doc_start() + s.doc_len() <= 60);
                let sum: f64 = s.start_probs.iter().sum();
                assert!((sum - 1.0).abs() < 1e-9);
            }
            assert!(ep.prediction.is_some());
            if mode.uses_policy() {
                assert_eq!(ep.returns.len(), 3);
            }
        }
    }

    #[test]
    fn test_mode_is_deterministic() {
        let model = Model::new(tiny_config(), Mode::RcmLstm, 4).unwrap();
        let ex = example(60, Some((30, 31)));
        let a = rollout(&model, &ex, 3, RolloutMode::Test, None, &mut ChaCha8Rng::seed_from_u64(1))
            .unwrap();
        let b = rollout(&model, &ex, 3, RolloutMode::Test, None, &mut ChaCha8Rng::seed_from_u64(2))
            .unwrap();
        assert_eq!(a.episode, b.episode);
    }

    #[test]
    fn recorded_action_probs_match_policy() {
        let model = Model::new(tiny_config(), Mode::RcmGated, 4).unwrap();
        let ex = example(60, Some((30, 31)));
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let r = rollout(&model, &ex, 3, RolloutMode::Train, None, &mut rng).unwrap();
        for (s, v) in r.episode.segments.iter().zip(&r.vars) {
            if let (Some(a), Some(lp)) = (s.action, v.action_logp) {
                assert!((r.graph.scalar(lp).exp() - a.prob).abs() < 1e-12);
                assert_eq!(s.policy_probs.as_ref().unwrap()[a.index], a.prob);
            }
        }
    }
}
