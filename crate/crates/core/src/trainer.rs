//! Joint optimisation of the answer, scorer and policy losses.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::checkpoint::{Checkpoint, CheckpointError};
use crate::chunking::Episode;
use crate::data::{derive_seed, QAExample};
use crate::episode::{rollout, EpisodeError, Rollout, RolloutMode};
use crate::model::Model;
use crate::tensor::{Graph, ParamStore, Result as TResult, Tensor, TensorError, Var};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Episode(#[from] EpisodeError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("non-finite {term} at step {step}")]
    NonFinite { term: &'static str, step: usize },
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("empty training set")]
    EmptyDataset,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub peak_lr: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
    pub batch_size: usize,
    /// Segments read per question.
    pub segments: usize,
    pub seed: u64,
    /// Global gradient-norm clip; non-positive disables clipping.
    pub clip_norm: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Leading steps during which every reader moves by the fixed stride and
    /// the policy is not updated, so the extractor gives informative rewards
    /// by the time the policy starts learning.
    pub policy_delay_steps: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            peak_lr: 1e-3,
            warmup_steps: 100,
            total_steps: 1000,
            batch_size: 8,
            segments: 3,
            seed: 1,
            clip_norm: 1.0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            policy_delay_steps: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.warmup_steps > self.total_steps {
            return Err(TrainError::Config(format!(
                "warmup_steps {} > total_steps {}",
                self.warmup_steps, self.total_steps
            )));
        }
        if !(self.peak_lr >= 0.0) {
            return Err(TrainError::Config(format!("peak_lr {} is negative", self.peak_lr)));
        }
        if self.batch_size == 0 || self.segments == 0 {
            return Err(TrainError::Config("batch_size and segments must be positive".into()));
        }
        Ok(())
    }
}

/// Linear warmup to `peak` at `warmup`, then linear decay to 0 at `total`.
pub fn learning_rate(step: usize, peak: f64, warmup: usize, total: usize) -> f64 {
    if step == 0 {
        return 0.0;
    }
    if step <= warmup {
        return peak * (step as f64 / warmup as f64);
    }
    if step >= total {
        return 0.0;
    }
    peak * ((total - step) as f64 / (total - warmup) as f64)
}

/// Rescales gradients so their global norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_grad_norm(store: &mut ParamStore, max_norm: f64) -> f64 {
    let norm = store.grad_norm();
    if max_norm > 0.0 && norm > max_norm {
        store.scale_grads(max_norm / norm);
    }
    norm
}

/// Adam moment buffers.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(store: &ParamStore, beta1: f64, beta2: f64, eps: f64) -> Self {
        let zeros: Vec<Vec<f64>> = store.ids().map(|id| vec![0.0; store.get(id).len()]).collect();
        Self {
            beta1,
            beta2,
            eps,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// One bias-corrected update with step index `step` (1-based).
    pub fn step(&mut self, store: &mut ParamStore, step: usize, lr: f64) {
        assert!(step >= 1, "Adam step index starts at 1");
        let bc1 = 1.0 - self.beta1.powi(step as i32);
        let bc2 = 1.0 - self.beta2.powi(step as i32);
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let Some(grad) = store.get(id).grad().map(<[f64]>::to_vec) else {
                // No gradient this step: moments still decay.
                self.m[id.0].iter_mut().for_each(|x| *x *= self.beta1);
                self.v[id.0].iter_mut().for_each(|x| *x *= self.beta2);
                let (m, v) = (&self.m[id.0], &self.v[id.0]);
                let data = store.get_mut(id).data_mut();
                for k in 0..data.len() {
                    let mh = m[k] / bc1;
                    let vh = v[k] / bc2;
                    data[k] -= lr * mh / (vh.sqrt() + self.eps);
                }
                continue;
            };
            let m = &mut self.m[id.0];
            let v = &mut self.v[id.0];
            let data = store.get_mut(id).data_mut();
            for k in 0..data.len() {
                m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * grad[k];
                v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * grad[k] * grad[k];
                let mh = m[k] / bc1;
                let vh = v[k] / bc2;
                data[k] -= lr * mh / (vh.sqrt() + self.eps);
            }
        }
    }

    fn to_tensors(&self, store: &ParamStore) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        for id in store.ids() {
            let shape = store.get(id).shape().to_vec();
            let name = store.name(id);
            out.push((
                format!("adam.m.{name}"),
                Tensor::new(shape.clone(), self.m[id.0].clone()).expect("shape"),
            ));
            out.push((
                format!("adam.v.{name}"),
                Tensor::new(shape, self.v[id.0].clone()).expect("shape"),
            ));
        }
        out
    }

    fn restore(&mut self, store: &ParamStore, ckpt: &Checkpoint) -> Result<(), CheckpointError> {
        for id in store.ids() {
            let name = store.name(id);
            for (prefix, buf) in [("adam.m.", &mut self.m[id.0]), ("adam.v.", &mut self.v[id.0])] {
                let key = format!("{prefix}{name}");
                let t = ckpt.get(&key).ok_or(CheckpointError::Missing(key.clone()))?;
                if t.len() != buf.len() {
                    return Err(CheckpointError::ShapeMismatch {
                        name: key,
                        expected: store.get(id).shape().to_vec(),
                        found: t.shape().to_vec(),
                    });
                }
                buf.copy_from_slice(t.data());
            }
        }
        Ok(())
    }
}

/// Loss nodes of one episode.
#[derive(Debug, Clone, Copy)]
pub struct EpisodeLoss {
    pub total: Option<Var>,
    pub answer: Option<Var>,
    pub scorer: Option<Var>,
    pub policy: Option<Var>,
}

/// Builds `L_ans + L_cs + L_cp` for one rollout inside its own graph. Rewards
/// enter as constants, so only the log-policy carries the policy gradient.
/// With `with_policy` false, `total` leaves out `L_cp`.
pub fn episode_loss(r: &mut Rollout, with_policy: bool) -> TResult<EpisodeLoss> {
    let g: &mut Graph = &mut r.graph;
    let mut ans_terms = Vec::new();
    let mut cs_terms = Vec::new();
    let mut cp_terms = Vec::new();
    for (c, (seg, v)) in r.episode.segments.iter().zip(&r.vars).enumerate() {
        if let (true, Some((i, j))) = (seg.contains, seg.gold_local) {
            let a = g.pick(v.start_logp, i)?;
            let b = g.pick(v.end_logp, j)?;
            let s = g.add(a, b)?;
            ans_terms.push(g.scale(s, -1.0));
        }
        if let Some(z) = v.score_logit {
            cs_terms.push(g.bce_with_logits(z, if seg.contains { 1.0 } else { 0.0 })?);
        }
        if let (Some(lp), Some(&credit)) = (v.action_logp, r.episode.credits.get(c)) {
            cp_terms.push(g.scale(lp, -credit));
        }
    }
    let answer = g.add_all(&ans_terms)?;
    let scorer = g.add_all(&cs_terms)?;
    let policy = g.add_all(&cp_terms)?;
    let parts: Vec<Var> = [answer, scorer, policy.filter(|_| with_policy)]
        .into_iter()
        .flatten()
        .collect();
    let total = g.add_all(&parts)?;
    Ok(EpisodeLoss {
        total,
        answer,
        scorer,
        policy,
    })
}

/// `-Σ log π(a|s)·R(s, a)` over every move taken in `episodes`, each move
/// credited with the return of the segment it leads to.
pub fn policy_loss(episodes: &[Episode]) -> f64 {
    let mut total = 0.0;
    for ep in episodes {
        for (s, &credit) in ep.segments.iter().zip(&ep.credits) {
            if let Some(a) = s.action {
                if credit != 0.0 {
                    total -= a.prob.ln() * credit;
                }
            }
        }
    }
    total
}

/// `L_ans + L_cs + L_cp` evaluated from recorded probabilities.
pub fn total_loss(episodes: &[Episode]) -> f64 {
    crate::answer::answer_loss(episodes) + crate::answer::scorer_loss(episodes) + policy_loss(episodes)
}

/// One row of the training log.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepLog {
    pub step: usize,
    pub lr: f64,
    pub l_ans: f64,
    pub l_cs: f64,
    pub l_cp: f64,
    pub mean_r: f64,
}

impl StepLog {
    pub const CSV_HEADER: &'static str = "step,lr,L_ans,L_cs,L_cp,mean_R";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{:.8e},{:.8},{:.8},{:.8},{:.8}",
            self.step, self.lr, self.l_ans, self.l_cs, self.l_cp, self.mean_r
        )
    }
}

/// Stateful training run that can be checkpointed and resumed.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub model: Model,
    pub config: TrainConfig,
    pub adam: Adam,
    /// Number of completed optimisation steps.
    pub step: usize,
    pub log: Vec<StepLog>,
}

impl Trainer {
    pub fn new(model: Model, config: TrainConfig) -> Result<Self, TrainError> {
        config.validate()?;
        let adam = Adam::new(&model.store, config.beta1, config.beta2, config.eps);
        Ok(Self {
            model,
            config,
            adam,
            step: 0,
            log: Vec::new(),
        })
    }

    /// Example indices of batch `step` (1-based): consecutive slices of a
    /// per-epoch permutation.
    pub fn batch_indices(&self, step: usize, n: usize) -> Vec<usize> {
        let b = self.config.batch_size;
        let first = (step - 1) * b;
        let mut cached: Option<(usize, Vec<usize>)> = None;
        (first..first + b)
            .map(|k| {
                let epoch = k / n;
                if cached.as_ref().map(|c| c.0) != Some(epoch) {
                    let mut order: Vec<usize> = (0..n).collect();
                    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.config.seed, epoch as u64));
                    order.shuffle(&mut rng);
                    cached = Some((epoch, order));
                }
                cached.as_ref().unwrap().1[k % n]
            })
            .collect()
    }

    /// Runs one optimisation step on `data`.
    pub fn train_step(&mut self, data: &[QAExample]) -> Result<StepLog, TrainError> {
        if data.is_empty() {
            return Err(TrainError::EmptyDataset);
        }
        let step = self.step + 1;
        let batch = self.batch_indices(step, data.len());
        let warmup = step <= self.config.policy_delay_steps;
        self.model.store.zero_grads();
        let (mut l_ans, mut l_cs, mut l_cp, mut r_sum) = (0.0, 0.0, 0.0, 0.0);
        for (k, &idx) in batch.iter().enumerate() {
            let sample = ((step - 1) * self.config.batch_size + k) as u64;
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.config.seed ^ 0x5EED, sample));
            let mut r = rollout(
                &self.model,
                &data[idx],
                self.config.segments,
                RolloutMode::Train,
                warmup.then_some(self.model.config.stride),
                &mut rng,
            )?;
            let loss = episode_loss(&mut r, !warmup)?;
            let val = |v: Option<Var>| v.map_or(0.0, |v| r.graph.scalar(v));
            let (a, c, p) = (val(loss.answer), val(loss.scorer), val(loss.policy));
            for (term, x) in [("L_ans", a), ("L_cs", c), ("L_cp", p)] {
                if !x.is_finite() {
                    return Err(TrainError::NonFinite { term, step });
                }
            }
            l_ans += a;
            l_cs += c;
            l_cp += p;
            r_sum += r.episode.returns.first().copied().unwrap_or(0.0);
            if let Some(total) = loss.total {
                r.graph.backward(total, &mut self.model.store)?;
            }
        }
        if !self.model.store.grad_norm().is_finite() {
            return Err(TrainError::NonFinite {
                term: "gradient",
                step,
            });
        }
        clip_grad_norm(&mut self.model.store, self.config.clip_norm);
        let lr = learning_rate(
            step,
            self.config.peak_lr,
            self.config.warmup_steps,
            self.config.total_steps,
        );
        self.adam.step(&mut self.model.store, step, lr);
        self.step = step;
        let entry = StepLog {
            step,
            lr,
            l_ans,
            l_cs,
            l_cp,
            mean_r: r_sum / batch.len() as f64,
        };
        self.log.push(entry);
        Ok(entry)
    }

    /// Trains until `total_steps`, calling `on_step` after every step.
    pub fn run(
        &mut self,
        data: &[QAExample],
        mut on_step: impl FnMut(&Trainer) -> Result<(), TrainError>,
    ) -> Result<(), TrainError> {
        while self.step < self.config.total_steps {
            self.train_step(data)?;
            on_step(self)?;
        }
        Ok(())
    }

    /// Parameters, optimiser moments and step counter.
    pub fn checkpoint(&self) -> Checkpoint {
        let mut c = self.model.checkpoint();
        c.meta.insert("step".into(), self.step.to_string());
        c.tensors.extend(self.adam.to_tensors(&self.model.store));
        c
    }

    /// Restores a state written by [`Trainer::checkpoint`]; the log is
    /// truncated to the restored step.
    pub fn resume(&mut self, ckpt: &Checkpoint) -> Result<(), TrainError> {
        self.model.restore(ckpt)?;
        self.adam.restore(&self.model.store, ckpt)?;
        self.step = ckpt
            .meta
            .get("step")
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| CheckpointError::Missing("step".into()))?;
        self.log.retain(|l| l.step <= self.step);
        Ok(())
    }
}

/// Trains a fresh run to completion and returns the per-step log.
pub fn train(model: Model, data: &[QAExample], config: TrainConfig) -> Result<Trainer, TrainError> {
    if data.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let mut t = Trainer::new(model, config)?;
    t.run(data, |_| Ok(()))?;
    Ok(t)
}
