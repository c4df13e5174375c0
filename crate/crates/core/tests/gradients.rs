mod common;

use std::rc::Rc;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use rcm_core::chunking::{recur_gated, recur_lstm};
use rcm_core::data::QAExample;
use rcm_core::encoder::{build_input, EncoderDims, EncoderParams};
use rcm_core::episode::{rollout, RolloutMode};
use rcm_core::model::{Mode, Model};
use rcm_core::tensor::{grad_check, Graph, ParamId, ParamStore, Tensor, Var};
use rcm_core::trainer::episode_loss;

type R<T> = Result<T, rcm_core::tensor::TensorError>;

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.5..1.5)).collect()).unwrap()
}

/// Contracts a node with a fixed random tensor so every output element
/// reaches the scalar loss with a distinct weight.
fn project(g: &mut Graph, out: Var, seed: u64) -> R<Var> {
    let [r, c] = g.shape(out);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xABCD);
    let w = g.input(&random(&mut rng, &[r, c]));
    let m = g.mul(out, w)?;
    Ok(g.sum(m))
}

struct Case {
    store: ParamStore,
    a: ParamId,
    b: ParamId,
    row: ParamId,
    scalar: ParamId,
    m: usize,
    n: usize,
}

fn case(seed: u64) -> Case {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let m = rng.gen_range(1..=4);
    let n = rng.gen_range(2..=5);
    let mut store = ParamStore::new();
    let a = store.add("a", random(&mut rng, &[m, n]));
    let b = store.add("b", random(&mut rng, &[m, n]));
    let row = store.add("row", random(&mut rng, &[1, n]));
    let scalar = store.add("s", random(&mut rng, &[1, 1]));
    Case { store, a, b, row, scalar, m, n }
}

fn check(seed: u64, name: &str, f: impl Fn(&mut Graph, Var, Var, Var, Var) -> R<Var>) {
    let mut c = case(seed);
    let ids = [c.a, c.b, c.row, c.scalar];
    let err = grad_check(
        |g, s| {
            let a = g.param(s, ids[0]);
            let b = g.param(s, ids[1]);
            let row = g.param(s, ids[2]);
            let sc = g.param(s, ids[3]);
            let out = f(g, a, b, row, sc)?;
            project(g, out, seed)
        },
        &mut c.store,
        &ids,
        1e-5,
        None,
    )
    .unwrap();
    assert!(err < 1e-6, "{name} seed {seed} (m={}, n={}): {err}", c.m, c.n);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(50))]

    #[test]
    fn primitive_gradients_match_finite_differences(seed in any::<u64>()) {
        check(seed, "matmul_t", |g, a, b, _, _| g.matmul_t(a, b));
        check(seed, "matmul", |g, a, b, _, _| {
            let bt = g.matmul_t(b, a)?;
            g.matmul(bt, a)
        });
        check(seed, "add", |g, a, b, _, _| g.add(a, b));
        check(seed, "add_row", |g, a, _, row, _| g.add_row(a, row));
        check(seed, "mul", |g, a, b, _, _| g.mul(a, b));
        check(seed, "scale", |g, a, _, _, _| Ok(g.scale(a, -1.7)));
        check(seed, "scale_by", |g, a, _, _, s| g.scale_by(a, s));
        check(seed, "sigmoid", |g, a, _, _, _| Ok(g.sigmoid(a)));
        check(seed, "tanh", |g, a, _, _, _| Ok(g.tanh(a)));
        check(seed, "gelu", |g, a, _, _, _| Ok(g.gelu(a)));
        check(seed, "softmax_rows", |g, a, _, _, _| Ok(g.softmax_rows(a)));
        check(seed, "log_softmax_rows", |g, a, _, _, _| g.log_softmax_rows(a, None));
        check(seed, "masked log_softmax_rows", |g, a, _, _, _| {
            let n = g.shape(a)[1];
            let mask: Rc<[bool]> = (0..n).map(|i| i % 2 == 0).collect();
            let lp = g.log_softmax_rows(a, Some(mask.clone()))?;
            // Masked columns hold -inf log-probabilities; read only the live ones.
            g.slice_cols(lp, 0, 1)
        });
        check(seed, "layer_norm", |g, a, _, row, _| {
            let bias = g.scale(row, 0.3);
            g.layer_norm(a, row, bias)
        });
        check(seed, "embedding", |g, a, _, _, _| {
            let rows = g.shape(a)[0];
            let ids: Vec<usize> = (0..5).map(|i| (i * 7 + 1) % rows).collect();
            g.embedding(a, &ids)
        });
        check(seed, "concat_cols", |g, a, b, _, _| g.concat_cols(&[a, b, a]));
        check(seed, "slice_cols", |g, a, _, _, _| {
            let n = g.shape(a)[1];
            g.slice_cols(a, 1, n - 1)
        });
        check(seed, "slice_rows", |g, a, _, _, _| {
            let m = g.shape(a)[0];
            g.slice_rows(a, m - 1, 1)
        });
        check(seed, "pick", |g, a, _, _, _| g.pick(a, 1));
        check(seed, "bce_with_logits", |g, _, _, _, s| {
            let p = g.bce_with_logits(s, 1.0)?;
            let n = g.bce_with_logits(s, 0.0)?;
            g.add(p, n)
        });
    }

    #[test]
    fn softmax_rows_are_distributions(seed in any::<u64>()) {
        let c = case(seed);
        let mut g = Graph::new();
        let a = g.param(&c.store, c.a);
        let s = g.softmax_rows(a);
        for row in g.value(s).chunks(c.n) {
            prop_assert!(row.iter().all(|x| (0.0..=1.0).contains(x)));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}

#[test]
fn three_layer_composite() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut store = ParamStore::new();
    let x = store.add("x", random(&mut rng, &[3, 4]));
    let w: Vec<ParamId> = (0..3)
        .map(|i| store.add(format!("w{i}"), random(&mut rng, &[4, 4])))
        .collect();
    let b: Vec<ParamId> = (0..3)
        .map(|i| store.add(format!("b{i}"), random(&mut rng, &[1, 4])))
        .collect();
    let mut ids = vec![x];
    ids.extend(&w);
    ids.extend(&b);
    let err = grad_check(
        |g, s| {
            let mut h = g.param(s, x);
            for i in 0..3 {
                let wv = g.param(s, w[i]);
                let bv = g.param(s, b[i]);
                let z = g.matmul(h, wv)?;
                let z = g.add_row(z, bv)?;
                h = if i == 2 { g.softmax_rows(z) } else { g.tanh(z) };
            }
            project(g, h, 3)
        },
        &mut store,
        &ids,
        1e-5,
        None,
    )
    .unwrap();
    assert!(err < 1e-4, "{err}");
}

fn example(doc: usize, q: usize) -> QAExample {
    QAExample {
        doc_tokens: (0..doc).map(|i| 10 + i % 20).collect(),
        question_tokens: (0..q).map(|i| 12 + i).collect(),
        answer: Some((1, 2)),
        reference_answers: vec![vec!["w".into()]],
        answerable: true,
    }
}

#[test]
fn encoder_on_eight_tokens() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut store = ParamStore::new();
    let dims = EncoderDims {
        vocab: 40,
        max_seq_len: 8,
        d_model: 6,
        layers: 2,
        heads: 2,
        d_ff: 10,
    };
    let enc = EncoderParams::new(&mut store, dims, &mut rng);
    // 1 + 2 + 1 + 3 + 1 = 8 tokens.
    let input = build_input(&example(20, 2), 4, 8, 4).unwrap();
    assert_eq!(input.tokens.len(), 8);
    let ids: Vec<ParamId> = store.ids().collect();
    let err = grad_check(
        |g, s| {
            let out = enc.encode(g, s, &input)?;
            project(g, out.h, 8)
        },
        &mut store,
        &ids,
        1e-5,
        None,
    )
    .unwrap();
    assert!(err < 1e-4, "{err}");

    // Deterministic, and the segment vector is row 0.
    let mut g1 = Graph::new();
    let a = enc.encode(&mut g1, &store, &input).unwrap();
    let mut g2 = Graph::new();
    let b = enc.encode(&mut g2, &store, &input).unwrap();
    assert_eq!(g1.value(a.h), g2.value(b.h));
    assert_eq!(g1.value(a.v), &g1.value(a.h)[..6]);
}

fn sig(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[test]
fn gated_recurrence_matches_scalar_recomputation() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let d = 5;
    let (v, prev) = (random(&mut rng, &[1, d]), random(&mut rng, &[1, d]));
    let (w, b) = (random(&mut rng, &[2 * d, 2]), random(&mut rng, &[1, 2]));
    let mut g = Graph::new();
    let vars = [&v, &prev, &w, &b].map(|t| g.input(t));
    let out = recur_gated(&mut g, vars[0], vars[1], vars[2], vars[3]).unwrap();

    let cat: Vec<f64> = v.data().iter().chain(prev.data()).copied().collect();
    let logit = |k: usize| b.data()[k] + (0..2 * d).map(|i| cat[i] * w.data()[i * 2 + k]).sum::<f64>();
    let (l0, l1) = (logit(0), logit(1));
    let alpha = l0.exp() / (l0.exp() + l1.exp());
    let beta = l1.exp() / (l0.exp() + l1.exp());
    assert_eq!(alpha + beta, 1.0);
    for i in 0..d {
        let want = alpha * v.data()[i] + beta * prev.data()[i];
        assert!((g.value(out)[i] - want).abs() < 1e-12);
    }
}

#[test]
fn lstm_cell_matches_scalar_recomputation() {
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let d = 4;
    let (x, h, c) = (
        random(&mut rng, &[1, d]),
        random(&mut rng, &[1, d]),
        random(&mut rng, &[1, d]),
    );
    let (w, b) = (random(&mut rng, &[2 * d, 4 * d]), random(&mut rng, &[1, 4 * d]));
    let mut g = Graph::new();
    let vars = [&x, &h, &c, &w, &b].map(|t| g.input(t));
    let (h_new, c_new) = recur_lstm(&mut g, vars[0], vars[1], vars[2], vars[3], vars[4]).unwrap();

    let cat: Vec<f64> = x.data().iter().chain(h.data()).copied().collect();
    let z = |col: usize| b.data()[col] + (0..2 * d).map(|i| cat[i] * w.data()[i * 4 * d + col]).sum::<f64>();
    for k in 0..d {
        let ig = sig(z(k));
        let fg = sig(z(d + k));
        let cand = z(2 * d + k).tanh();
        let og = sig(z(3 * d + k));
        let cell = fg * c.data()[k] + ig * cand;
        assert!((g.value(c_new)[k] - cell).abs() < 1e-12);
        assert!((g.value(h_new)[k] - og * cell.tanh()).abs() < 1e-12);
    }
}

#[test]
fn recurrence_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let d = 3;
    let mut store = ParamStore::new();
    let ids: Vec<ParamId> = [[1, d], [1, d], [1, d], [2 * d, 4 * d], [1, 4 * d], [2 * d, 2], [1, 2]]
        .iter()
        .enumerate()
        .map(|(i, s)| store.add(format!("p{i}"), random(&mut rng, s)))
        .collect();
    let err = grad_check(
        |g, s| {
            let p: Vec<Var> = ids.iter().map(|&id| g.param(s, id)).collect();
            let (h, c) = recur_lstm(g, p[0], p[1], p[2], p[3], p[4])?;
            let gated = recur_gated(g, h, c, p[5], p[6])?;
            project(g, gated, 23)
        },
        &mut store,
        &ids,
        1e-5,
        None,
    )
    .unwrap();
    assert!(err < 1e-6, "{err}");
}

#[test]
fn full_model_loss_gradients() {
    for mode in [Mode::RcmGated, Mode::RcmLstm, Mode::Baseline] {
        let err = common::full_model_check(mode);
        assert!(err < 1e-4, "{mode}: {err}");
    }
}

#[test]
fn loss_gradient_is_the_sum_of_component_gradients() {
    let (mut model, ex, seed) = common::grad_model(Mode::RcmGated);
    let grads = |model: &mut Model, pick: &dyn Fn(&rcm_core::trainer::EpisodeLoss) -> Vec<Var>| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut r = rollout(model, &ex, 2, RolloutMode::Train, None, &mut rng).unwrap();
        let l = episode_loss(&mut r, true).unwrap();
        model.store.zero_grads();
        for v in pick(&l) {
            r.graph.backward(v, &mut model.store).unwrap();
        }
        model
            .store
            .iter()
            .flat_map(|(_, t)| t.grad().map(<[f64]>::to_vec).unwrap_or(vec![0.0; t.len()]))
            .collect::<Vec<f64>>()
    };
    let whole = grads(&mut model, &|l| vec![l.total.unwrap()]);
    let parts = grads(&mut model, &|l| {
        [l.answer, l.scorer, l.policy].into_iter().flatten().collect()
    });
    assert!(whole.iter().any(|x| *x != 0.0));
    for (a, b) in whole.iter().zip(&parts) {
        assert!((a - b).abs() <= 1e-10 * (1.0 + a.abs()), "{a} vs {b}");
    }
}
