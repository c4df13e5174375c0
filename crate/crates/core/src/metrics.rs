//! Word-level F1 and the segment-placement analyses.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::chunking::Episode;
use crate::data::{QAExample, Vocab};
use crate::episode::{rollout, EpisodeError, RolloutMode};
use crate::model::Model;

/// Word-level F1 of `prediction` against the best matching reference.
///
/// `None` is the unanswerable prediction; an empty `references` list marks an
/// unanswerable question. Token overlap is counted as a multiset.
pub fn word_f1(prediction: Option<&[String]>, references: &[Vec<String>]) -> f64 {
    match (prediction, references.is_empty()) {
        (None, true) => 1.0,
        (None, false) | (Some(_), true) => 0.0,
        (Some(pred), false) => references
            .iter()
            .map(|r| f1_single(pred, r))
            .fold(0.0, f64::max),
    }
}

fn f1_single(pred: &[String], reference: &[String]) -> f64 {
    if pred.is_empty() || reference.is_empty() {
        return 0.0;
    }
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for t in reference {
        *counts.entry(t.as_str()).or_default() += 1;
    }
    let mut common = 0usize;
    for t in pred {
        if let Some(c) = counts.get_mut(t.as_str()) {
            if *c > 0 {
                *c -= 1;
                common += 1;
            }
        }
    }
    if common == 0 {
        return 0.0;
    }
    let p = common as f64 / pred.len() as f64;
    let r = common as f64 / reference.len() as f64;
    2.0 * p * r / (p + r)
}

/// Fraction of all segments that contain the complete answer.
pub fn hit_rate(episodes: &[Episode]) -> f64 {
    let (hits, total) = episodes
        .iter()
        .flat_map(|e| &e.segments)
        .fold((0usize, 0usize), |(h, n), s| (h + s.contains as usize, n + 1));
    if total == 0 {
        0.0
    } else {
        hits as f64 / total as f64
    }
}

/// `|answer centre - window centre|` in document tokens.
pub fn center_distance(doc_start: usize, doc_len: usize, answer: (usize, usize)) -> f64 {
    let window = doc_start as f64 + doc_len as f64 / 2.0;
    let ans = (answer.0 + answer.1) as f64 / 2.0;
    (ans - window).abs()
}

/// Mean centre distance per segment index over answerable examples.
///
/// Segments that miss the answer are still measured to the true answer.
pub fn center_distances(episodes: &[Episode], examples: &[QAExample]) -> Vec<f64> {
    let mut sums: Vec<(f64, usize)> = Vec::new();
    for (ep, ex) in episodes.iter().zip(examples) {
        let Some(ans) = ex.answer.filter(|_| ex.answerable) else {
            continue;
        };
        for (c, s) in ep.segments.iter().enumerate() {
            if sums.len() <= c {
                sums.push((0.0, 0));
            }
            sums[c].0 += center_distance(s.doc_start(), s.doc_len(), ans);
            sums[c].1 += 1;
        }
    }
    sums.into_iter().map(|(s, n)| s / n as f64).collect()
}

/// One row of the distance-vs-F1 table.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BucketRow {
    /// Lower edge of the bucket in tokens.
    pub distance: usize,
    pub count: usize,
    pub mean_f1: f64,
}

/// Mean F1 per distance bucket, where the distance is measured from the
/// segment that produced each prediction. Unanswerable examples are skipped;
/// empty buckets are omitted.
pub fn distance_bucket_f1(
    f1s: &[f64],
    episodes: &[Episode],
    examples: &[QAExample],
    bucket_width: usize,
) -> Vec<BucketRow> {
    let width = bucket_width.max(1);
    let mut buckets: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
    for ((f1, ep), ex) in f1s.iter().zip(episodes).zip(examples) {
        let (Some(ans), Some(pred)) = (ex.answer.filter(|_| ex.answerable), &ep.prediction) else {
            continue;
        };
        let s = &ep.segments[pred.segment];
        let d = center_distance(s.doc_start(), s.doc_len(), ans);
        let b = (d / width as f64).floor() as usize;
        let e = buckets.entry(b).or_default();
        e.0 += f1;
        e.1 += 1;
    }
    buckets
        .into_iter()
        .map(|(b, (sum, n))| BucketRow {
            distance: b * width,
            count: n,
            mean_f1: sum / n as f64,
        })
        .collect()
}

fn ranks(xs: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..xs.len()).collect();
    idx.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut r = vec![0.0; xs.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && xs[idx[j + 1]] == xs[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            r[k] = avg;
        }
        i = j + 1;
    }
    r
}

/// Spearman rank correlation with average ranks for ties; `None` when either
/// side is constant or shorter than two.
pub fn spearman(xs: &[f64], ys: &[f64]) -> Option<f64> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return None;
    }
    let (rx, ry) = (ranks(xs), ranks(ys));
    let n = xs.len() as f64;
    let mx = rx.iter().sum::<f64>() / n;
    let my = ry.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some(sxy / (sxx * syy).sqrt())
}

/// Spearman correlation between bucket distance and mean F1.
pub fn bucket_trend(rows: &[BucketRow]) -> Option<f64> {
    let d: Vec<f64> = rows.iter().map(|r| r.distance as f64).collect();
    let f: Vec<f64> = rows.iter().map(|r| r.mean_f1).collect();
    spearman(&d, &f)
}

/// One line of `predictions.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub example_id: usize,
    pub answer_text: String,
    pub doc_start: Option<usize>,
    pub doc_end: Option<usize>,
    pub score: f64,
    pub unanswerable: bool,
}

/// Aggregate evaluation of one reader on one example set.
#[derive(Debug, Clone)]
pub struct EvalReport {
    /// Mean word F1 over all examples, in `[0, 1]`.
    pub f1: f64,
    pub answerable_f1: Option<f64>,
    /// Fraction of unanswerable questions answered with `[UNK]`.
    pub unanswerable_recall: Option<f64>,
    /// Over answerable examples only.
    pub hit_rate: f64,
    pub center_distances: Vec<f64>,
    pub buckets: Vec<BucketRow>,
    pub per_example_f1: Vec<f64>,
    pub predictions: Vec<PredictionRecord>,
    pub episodes: Vec<Episode>,
}

/// Reads every example with argmax actions and scores the predictions.
///
/// `stride` overrides the fixed stride of non-policy readers.
pub fn evaluate(
    model: &Model,
    examples: &[QAExample],
    vocab: &Vocab,
    segments: usize,
    stride: Option<i64>,
    bucket_width: usize,
) -> Result<EvalReport, EpisodeError> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut episodes = Vec::with_capacity(examples.len());
    let mut predictions = Vec::with_capacity(examples.len());
    let mut f1s = Vec::with_capacity(examples.len());
    for (id, ex) in examples.iter().enumerate() {
        let ep = rollout(model, ex, segments, RolloutMode::Test, stride, &mut rng)?.episode;
        let pred = ep.prediction.as_ref();
        let span = pred.and_then(|p| p.doc_span);
        let tokens = span.map(|(s, e)| vocab.tokens(&ex.doc_tokens[s..=e]));
        f1s.push(word_f1(tokens.as_deref(), &ex.reference_answers));
        predictions.push(PredictionRecord {
            example_id: id,
            answer_text: tokens.map(|t| t.join(" ")).unwrap_or_default(),
            doc_start: span.map(|s| s.0),
            doc_end: span.map(|s| s.1),
            score: pred.map_or(0.0, |p| p.score),
            unanswerable: span.is_none(),
        });
        episodes.push(ep);
    }

    let mean = |xs: &[f64]| (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64);
    let ans_idx: Vec<usize> = (0..examples.len()).filter(|&i| examples[i].answerable).collect();
    let ans_f1: Vec<f64> = ans_idx.iter().map(|&i| f1s[i]).collect();
    let unans: Vec<f64> = (0..examples.len())
        .filter(|&i| !examples[i].answerable)
        .map(|i| predictions[i].unanswerable as u8 as f64)
        .collect();
    let ans_eps: Vec<Episode> = ans_idx.iter().map(|&i| episodes[i].clone()).collect();

    Ok(EvalReport {
        f1: mean(&f1s).unwrap_or(0.0),
        answerable_f1: mean(&ans_f1),
        unanswerable_recall: mean(&unans),
        hit_rate: hit_rate(&ans_eps),
        center_distances: center_distances(&episodes, examples),
        buckets: distance_bucket_f1(&f1s, &episodes, examples, bucket_width),
        per_example_f1: f1s,
        predictions,
        episodes,
    })
}

impl EvalReport {
    pub fn f1_csv(&self) -> String {
        let mut s = String::from("metric,value\n");
        let _ = writeln!(s, "f1,{:.6}", self.f1 * 100.0);
        if let Some(a) = self.answerable_f1 {
            let _ = writeln!(s, "answerable_f1,{:.6}", a * 100.0);
        }
        if let Some(u) = self.unanswerable_recall {
            let _ = writeln!(s, "unanswerable_recall,{:.6}", u * 100.0);
        }
        s
    }

    pub fn hit_rate_csv(&self) -> String {
        format!("hit_rate\n{:.6}\n", self.hit_rate * 100.0)
    }

    pub fn center_distance_csv(&self) -> String {
        let mut s = String::from("segment,mean_distance\n");
        for (c, d) in self.center_distances.iter().enumerate() {
            let _ = writeln!(s, "{},{:.6}", c + 1, d);
        }
        s
    }

    pub fn distance_f1_csv(&self) -> String {
        let mut s = String::from("distance,count,mean_f1\n");
        for r in &self.buckets {
            let _ = writeln!(s, "{},{},{:.6}", r.distance, r.count, r.mean_f1 * 100.0);
        }
        s
    }
}

/// F1 for every (training stride, prediction stride) pair.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepGrid {
    pub train_strides: Vec<i64>,
    pub pred_strides: Vec<i64>,
    /// `f1[t][p]`, in `[0, 1]`.
    pub f1: Vec<Vec<f64>>,
}

impl SweepGrid {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("train_stride,pred_stride,f1\n");
        for (t, row) in self.train_strides.iter().zip(&self.f1) {
            for (p, f) in self.pred_strides.iter().zip(row) {
                let _ = writeln!(s, "{t},{p},{:.6}", f * 100.0);
            }
        }
        s
    }

    /// Spread between the best and worst cell, in `[0, 1]`.
    pub fn range(&self) -> f64 {
        let all = self.f1.iter().flatten();
        let hi = all.clone().copied().fold(f64::NEG_INFINITY, f64::max);
        let lo = all.copied().fold(f64::INFINITY, f64::min);
        hi - lo
    }
}

/// Trains one fixed-stride reader per training stride and evaluates it at
/// every prediction stride.
pub fn stride_sweep<E>(
    train_strides: &[i64],
    pred_strides: &[i64],
    mut train: impl FnMut(i64) -> Result<Model, E>,
    mut eval: impl FnMut(&Model, i64) -> Result<f64, E>,
) -> Result<SweepGrid, E> {
    let mut f1 = Vec::with_capacity(train_strides.len());
    for &t in train_strides {
        let model = train(t)?;
        let row = pred_strides
            .iter()
            .map(|&p| eval(&model, p))
            .collect::<Result<Vec<_>, _>>()?;
        f1.push(row);
    }
    Ok(SweepGrid {
        train_strides: train_strides.to_vec(),
        pred_strides: pred_strides.to_vec(),
        f1,
    })
}
