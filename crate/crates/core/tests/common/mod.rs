#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use rcm_core::chunking::{accumulated_rewards, action_credits, Episode, SegmentState};
use rcm_core::config::RunConfig;
use rcm_core::data::{generate_synthetic, QAExample};
use rcm_core::encoder::SegmentInput;
use rcm_core::episode::{rollout, RolloutMode};
use rcm_core::model::{Mode, Model};
use rcm_core::tensor::{Graph, ParamId, ParamStore, Tensor};
use rcm_core::trainer::episode_loss;

/// Segment over document tokens `doc_start..doc_start + n` laid out as
/// `[CLS] q [SEP] doc [UNK]`; `ps`/`pe` cover the `n + 1` answerable slots.
pub fn segment(doc_start: usize, ps: &[f64], pe: &[f64], q: Option<f64>) -> SegmentState {
    let n = ps.len() - 1;
    let mut tokens = vec![0, 9, 1];
    tokens.extend(std::iter::repeat(20).take(n));
    tokens.push(2);
    let mut position_map = vec![None; 3];
    position_map.extend((doc_start..doc_start + n).map(Some));
    position_map.push(None);
    let pad = |p: &[f64]| {
        let mut v = vec![0.0; 3];
        v.extend_from_slice(p);
        v
    };
    SegmentState {
        input: SegmentInput {
            tokens,
            doc_start,
            doc_len: n,
            position_map,
        },
        v: vec![],
        v_tilde: vec![],
        q,
        start_probs: pad(ps),
        end_probs: pad(pe),
        contains: false,
        gold_local: None,
        policy_probs: None,
        action: None,
    }
}

pub fn episode(segments: Vec<SegmentState>) -> Episode {
    Episode {
        segments,
        rewards: vec![],
        returns: vec![],
        credits: vec![],
        prediction: None,
    }
}

fn random_dist<R: Rng>(rng: &mut R, n: usize, coarse: bool) -> Vec<f64> {
    // Coarse values make exact ties common.
    let raw: Vec<f64> = (0..n)
        .map(|_| if coarse { rng.gen_range(1..5) as f64 } else { rng.gen_range(0.01..1.0) })
        .collect();
    let total: f64 = raw.iter().sum();
    raw.iter().map(|x| x / total).collect()
}

/// Random episode with 1–3 segments of 1–12 document tokens and frequent
/// exact score ties.
pub fn random_episode(seed: u64) -> Episode {
    build_episode(seed, true)
}

/// Like [`random_episode`] with continuous, practically tie-free values.
pub fn smooth_episode(seed: u64) -> Episode {
    build_episode(seed, false)
}

fn build_episode(seed: u64, coarse: bool) -> Episode {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let count = rng.gen_range(1..=3);
    let segs = (0..count)
        .map(|_| {
            let n = rng.gen_range(1..=12);
            let ps = random_dist(&mut rng, n + 1, coarse);
            let pe = random_dist(&mut rng, n + 1, coarse);
            let q = if coarse {
                [0.25, 0.5, 1.0][rng.gen_range(0..3)]
            } else {
                rng.gen_range(0.01..1.0)
            };
            segment(rng.gen_range(0..50), &ps, &pe, Some(q))
        })
        .collect();
    episode(segs)
}

/// Best `(score, segment, start, end)` by exhaustive search in the decoder's
/// documented order: highest score, then earliest segment, smaller start,
/// smaller end.
pub fn brute_force_decode(
    ep: &Episode,
    max_len: usize,
    weighted: bool,
) -> (f64, usize, usize, usize) {
    let mut best: Option<(f64, usize, usize, usize)> = None;
    for (c, s) in ep.segments.iter().enumerate() {
        let w = if weighted { s.q.unwrap_or(1.0) } else { 1.0 };
        let off = s.input.doc_offset();
        let n = s.input.doc_len;
        let mut cands = Vec::new();
        for i in off..off + n {
            for j in i..(i + max_len).min(off + n) {
                cands.push((s.start_probs[i] * s.end_probs[j] * w, i, j));
            }
        }
        let u = s.input.unk_index();
        // The UNK slot sits after every document position.
        cands.push((s.start_probs[u] * s.end_probs[u] * w, u, u));
        for (score, i, j) in cands {
            let better = match best {
                None => true,
                Some((bs, bc, bi, bj)) => {
                    score > bs || (score == bs && (c, i, j) < (bc, bi, bj))
                }
            };
            if better {
                best = Some((score, c, i, j));
            }
        }
    }
    best.expect("at least one candidate")
}

/// `Σ_c Π_{k<c}(1 − q_k)·q_c·r_c`.
pub fn closed_form_return(q: &[f64], r: &[f64]) -> f64 {
    let mut reach = 1.0;
    let mut total = 0.0;
    for (qc, rc) in q.iter().zip(r) {
        total += reach * qc * rc;
        reach *= 1.0 - qc;
    }
    total
}

/// Three segments, two binary decisions: the first move picks one of two
/// second segments, the second move one of two third segments below it.
/// Containment and extraction values are fixed per segment.
pub struct ToyMdp {
    pub store: ParamStore,
    /// Policy logits at the root and at each second-level state.
    pub logits: [ParamId; 3],
    pub q1: f64,
    pub r1: f64,
    pub q2: [f64; 2],
    pub r2: [f64; 2],
    pub q3: [[f64; 2]; 2],
    pub r3: [[f64; 2]; 2],
}

impl ToyMdp {
    pub fn new() -> Self {
        let mut store = ParamStore::new();
        let mk = |store: &mut ParamStore, name: &str, v: [f64; 2]| {
            store.add(name, Tensor::new(vec![1, 2], v.to_vec()).unwrap())
        };
        let logits = [
            mk(&mut store, "root", [0.2, -0.1]),
            mk(&mut store, "left", [0.0, 0.3]),
            mk(&mut store, "right", [-0.2, 0.1]),
        ];
        Self {
            store,
            logits,
            q1: 0.1,
            r1: 0.3,
            q2: [0.2, 0.6],
            r2: [0.1, 0.9],
            q3: [[0.9, 0.3], [0.5, 0.95]],
            r3: [[0.8, 0.1], [0.2, 1.0]],
        }
    }

    pub fn probs(&self, state: usize) -> [f64; 2] {
        let l = self.store.get(self.logits[state]).data();
        let m = l[0].max(l[1]);
        let (a, b) = ((l[0] - m).exp(), (l[1] - m).exp());
        [a / (a + b), b / (a + b)]
    }

    pub fn trajectory(&self, a1: usize, a2: usize) -> ([f64; 3], [f64; 3]) {
        (
            [self.q1, self.q2[a1], self.q3[a1][a2]],
            [self.r1, self.r2[a1], self.r3[a1][a2]],
        )
    }

    /// `J = E[R_1]` by enumerating all four action sequences.
    pub fn exact_j(&self) -> f64 {
        let p1 = self.probs(0);
        let mut j = 0.0;
        for a1 in 0..2 {
            let p2 = self.probs(1 + a1);
            for a2 in 0..2 {
                let (q, r) = self.trajectory(a1, a2);
                j += p1[a1] * p2[a2] * closed_form_return(&q, &r);
            }
        }
        j
    }

    /// Exact `∇J` with respect to the six logits, by enumeration:
    /// `Σ_seq R_1(seq)·∇P(seq)` with softmax derivatives.
    pub fn exact_grad(&self) -> [[f64; 2]; 3] {
        let p1 = self.probs(0);
        let mut g = [[0.0; 2]; 3];
        let dsoft = |p: [f64; 2], a: usize, k: usize| {
            p[a] * (if a == k { 1.0 } else { 0.0 } - p[k])
        };
        for a1 in 0..2 {
            let p2 = self.probs(1 + a1);
            for a2 in 0..2 {
                let (q, r) = self.trajectory(a1, a2);
                let ret = closed_form_return(&q, &r);
                for k in 0..2 {
                    g[0][k] += ret * dsoft(p1, a1, k) * p2[a2];
                    g[1 + a1][k] += ret * p1[a1] * dsoft(p2, a2, k);
                }
            }
        }
        g
    }

    /// Monte-Carlo policy gradient over `episodes` sampled episodes, using the
    /// library's return recursion, action credits and graph differentiation of
    /// `-Σ credit·log π(a|s)`. Returns the ascent direction (`-∇L_cp`).
    pub fn sampled_grad(&mut self, episodes: usize, seed: u64) -> [[f64; 2]; 3] {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.store.zero_grads();
        for _ in 0..episodes {
            let a1 = (rng.gen::<f64>() >= self.probs(0)[0]) as usize;
            let a2 = (rng.gen::<f64>() >= self.probs(1 + a1)[0]) as usize;
            let (q, r) = self.trajectory(a1, a2);
            let returns = accumulated_rewards(&q, &r).unwrap();
            let credits = action_credits(&q, &returns).unwrap();
            let mut g = Graph::new();
            let mut terms = Vec::new();
            for (c, (state, a)) in [(0, a1), (1 + a1, a2)].into_iter().enumerate() {
                let l = g.param(&self.store, self.logits[state]);
                let lp = g.log_softmax_rows(l, None).unwrap();
                let pick = g.pick(lp, a).unwrap();
                terms.push(g.scale(pick, -credits[c]));
            }
            let loss = g.add_all(&terms).unwrap().unwrap();
            g.backward(loss, &mut self.store).unwrap();
        }
        let mut out = [[0.0; 2]; 3];
        for (s, row) in out.iter_mut().enumerate() {
            // A state that was never visited has no gradient.
            if let Some(grad) = self.store.get(self.logits[s]).grad() {
                for k in 0..2 {
                    row[k] = -grad[k] / episodes as f64;
                }
            }
        }
        out
    }
}

/// Small, fast run configuration for end-to-end tests.
pub fn tiny_run_config() -> RunConfig {
    RunConfig {
        vocab_size: 40,
        doc_len_min: 40,
        doc_len_max: 60,
        answer_start_min: 10,
        answer_start_max: 40,
        cue_span: 6,
        count: 24,
        d_model: 8,
        layers: 1,
        heads: 2,
        d_ff: 16,
        max_seq_len: 24,
        question_budget: 4,
        actions: vec![-4, 4, 8, 16],
        stride: 8,
        segments: 3,
        max_answer_len: 6,
        total_steps: 6,
        warmup_steps: 2,
        batch_size: 2,
        lr: 1e-2,
        policy_delay_steps: 2,
        bucket_width: 4,
        ..RunConfig::default()
    }
}

/// Tiny reader plus an example and sampling seed whose episode has two
/// segments and, for policy readers, a move with non-zero credit.
pub fn grad_model(mode: Mode) -> (Model, QAExample, u64) {
    let mut cfg = tiny_run_config();
    cfg.segments = 2;
    cfg.layers = 2;
    cfg.max_answer_len = 30;
    let mut model = Model::new(cfg.model(), mode, 4).unwrap();
    // Give the zero-initialised policy some shape.
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    if let Some(p) = model.policy.clone() {
        for id in [p.w, p.b] {
            for x in model.store.get_mut(id).data_mut() {
                *x = rng.gen_range(-0.5..0.5);
            }
        }
    }
    let data = generate_synthetic(&cfg.synth()).unwrap();
    for ex in data {
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let r = rollout(&model, &ex, 2, RolloutMode::Train, None, &mut rng).unwrap();
            let active = !mode.uses_policy() || r.episode.credits[0] != 0.0;
            if r.episode.len() == 2 && r.episode.segments[1].contains && active {
                return (model, ex, seed);
            }
        }
    }
    panic!("no suitable example");
}

/// Total loss of the episode read with a fixed action stream. `credits`
/// replaces the recomputed credits so rewards stay detached.
fn loss_at(model: &Model, ex: &QAExample, seed: u64, credits: &[f64]) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut r = rollout(model, ex, 2, RolloutMode::Train, None, &mut rng).unwrap();
    r.episode.credits = credits.to_vec();
    let l = episode_loss(&mut r, true).unwrap();
    r.graph.scalar(l.total.unwrap())
}

pub fn full_model_check(mode: Mode) -> f64 {
    let (mut model, ex, seed) = grad_model(mode);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut r = rollout(&model, &ex, 2, RolloutMode::Train, None, &mut rng).unwrap();
    let credits = r.episode.credits.clone();
    let actions: Vec<_> = r.episode.segments.iter().map(|s| s.action).collect();
    let l = episode_loss(&mut r, true).unwrap();
    model.store.zero_grads();
    r.graph.backward(l.total.unwrap(), &mut model.store).unwrap();

    let eps = 1e-5;
    let mut worst: f64 = 0.0;
    let ids: Vec<ParamId> = model.store.ids().collect();
    for id in ids {
        let n = model.store.get(id).len();
        let analytic = model
            .store
            .get(id)
            .grad()
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; n]);
        for i in 0..n {
            let orig = model.store.get(id).data()[i];
            model.store.get_mut(id).data_mut()[i] = orig + eps;
            let plus = loss_at(&model, &ex, seed, &credits);
            model.store.get_mut(id).data_mut()[i] = orig - eps;
            let minus = loss_at(&model, &ex, seed, &credits);
            model.store.get_mut(id).data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            worst = worst.max((analytic[i] - numeric).abs() / numeric.abs().max(1.0));
        }
    }
    // The perturbations must not have changed the sampled moves.
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let again = rollout(&model, &ex, 2, RolloutMode::Train, None, &mut rng).unwrap();
    let same: Vec<_> = again.episode.segments.iter().map(|s| s.action).collect();
    assert_eq!(same, actions);
    worst
}
