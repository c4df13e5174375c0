//! Segment input layout and the transformer encoder.

use rand::Rng;
use thiserror::Error;

use crate::data::{QAExample, CLS, SEP, UNK};
use crate::tensor::{Graph, ParamId, ParamStore, Result as TResult, Tensor, Var};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum InputError {
    #[error("doc_start {start} outside document of {len} tokens")]
    StartOutOfRange { start: usize, len: usize },
    #[error("max_seq_len {max_seq_len} leaves no room for document tokens (question {question} + 3 specials)")]
    NoRoom { max_seq_len: usize, question: usize },
}

/// `[CLS] question [SEP] doc-window [UNK]` for one segment.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentInput {
    pub tokens: Vec<usize>,
    pub doc_start: usize,
    pub doc_len: usize,
    /// Input index → document index; `None` for specials and question tokens.
    pub position_map: Vec<Option<usize>>,
}

impl SegmentInput {
    /// Input index of the first document token.
    pub fn doc_offset(&self) -> usize {
        self.tokens.len() - 1 - self.doc_len
    }

    /// Input index of the trailing `[UNK]`.
    pub fn unk_index(&self) -> usize {
        self.tokens.len() - 1
    }

    /// Input index holding document token `doc_index`, if it is in the window.
    pub fn input_index(&self, doc_index: usize) -> Option<usize> {
        (doc_index >= self.doc_start && doc_index < self.doc_start + self.doc_len)
            .then(|| self.doc_offset() + doc_index - self.doc_start)
    }

    /// Positions a span may start or end at: the document window and `[UNK]`.
    pub fn answer_mask(&self) -> Vec<bool> {
        let off = self.doc_offset();
        (0..self.tokens.len())
            .map(|i| (i >= off && i < off + self.doc_len) || i == self.unk_index())
            .collect()
    }
}

/// Number of document tokens a window holds for a question of `question_len`.
pub fn window_len(question_len: usize, max_seq_len: usize, question_budget: usize) -> Option<usize> {
    max_seq_len
        .checked_sub(question_len.min(question_budget) + 3)
        .filter(|&n| n > 0)
}

pub fn build_input(
    example: &QAExample,
    doc_start: usize,
    max_seq_len: usize,
    question_budget: usize,
) -> Result<SegmentInput, InputError> {
    let doc = &example.doc_tokens;
    if doc_start >= doc.len() {
        return Err(InputError::StartOutOfRange {
            start: doc_start,
            len: doc.len(),
        });
    }
    let q = &example.question_tokens;
    let qlen = q.len().min(question_budget);
    let wlen = window_len(q.len(), max_seq_len, question_budget).ok_or(InputError::NoRoom {
        max_seq_len,
        question: qlen,
    })?;
    let doc_len = wlen.min(doc.len() - doc_start);

    let mut tokens = Vec::with_capacity(qlen + doc_len + 3);
    let mut position_map = Vec::with_capacity(tokens.capacity());
    tokens.push(CLS);
    tokens.extend_from_slice(&q[q.len() - qlen..]);
    tokens.push(SEP);
    position_map.resize(tokens.len(), None);
    tokens.extend_from_slice(&doc[doc_start..doc_start + doc_len]);
    position_map.extend((doc_start..doc_start + doc_len).map(Some));
    tokens.push(UNK);
    position_map.push(None);
    Ok(SegmentInput {
        tokens,
        doc_start,
        doc_len,
        position_map,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EncoderDims {
    pub vocab: usize,
    pub max_seq_len: usize,
    pub d_model: usize,
    pub layers: usize,
    pub heads: usize,
    pub d_ff: usize,
}

#[derive(Debug, Clone)]
struct Block {
    ln1_g: ParamId,
    ln1_b: ParamId,
    wq: ParamId,
    wk: ParamId,
    wv: ParamId,
    wo: ParamId,
    bq: ParamId,
    bk: ParamId,
    bv: ParamId,
    bo: ParamId,
    ln2_g: ParamId,
    ln2_b: ParamId,
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

/// Pre-norm transformer encoder with learned absolute positions.
#[derive(Debug, Clone)]
pub struct EncoderParams {
    pub dims: EncoderDims,
    tok_emb: ParamId,
    pos_emb: ParamId,
    blocks: Vec<Block>,
    lnf_g: ParamId,
    lnf_b: ParamId,
}

/// Encoder output for one segment.
#[derive(Debug, Clone)]
pub struct Encoded {
    /// `[input_len, d_model]` token representations.
    pub h: Var,
    /// `[1, d_model]` segment representation (row 0 of `h`).
    pub v: Var,
    /// Attention probabilities, one `[input_len, input_len]` node per layer and head.
    pub attention: Vec<Var>,
}

impl EncoderParams {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, dims: EncoderDims, rng: &mut R) -> Self {
        assert!(dims.layers >= 1 && dims.heads >= 1, "need at least one layer and head");
        assert_eq!(dims.d_model % dims.heads, 0, "d_model must divide into heads");
        let d = dims.d_model;
        let tok_emb = store.add("enc.tok_emb", Tensor::xavier(&[dims.vocab, d], rng));
        let pos_emb = store.add("enc.pos_emb", Tensor::xavier(&[dims.max_seq_len, d], rng));
        let blocks = (0..dims.layers)
            .map(|l| {
                let p = |n: &str| format!("enc.{l}.{n}");
                Block {
                    ln1_g: store.add(p("ln1_g"), Tensor::filled(&[1, d], 1.0)),
                    ln1_b: store.add(p("ln1_b"), Tensor::zeros(&[1, d])),
                    wq: store.add(p("wq"), Tensor::xavier(&[d, d], rng)),
                    wk: store.add(p("wk"), Tensor::xavier(&[d, d], rng)),
                    wv: store.add(p("wv"), Tensor::xavier(&[d, d], rng)),
                    wo: store.add(p("wo"), Tensor::xavier(&[d, d], rng)),
                    bq: store.add(p("bq"), Tensor::zeros(&[1, d])),
                    bk: store.add(p("bk"), Tensor::zeros(&[1, d])),
                    bv: store.add(p("bv"), Tensor::zeros(&[1, d])),
                    bo: store.add(p("bo"), Tensor::zeros(&[1, d])),
                    ln2_g: store.add(p("ln2_g"), Tensor::filled(&[1, d], 1.0)),
                    ln2_b: store.add(p("ln2_b"), Tensor::zeros(&[1, d])),
                    w1: store.add(p("w1"), Tensor::xavier(&[d, dims.d_ff], rng)),
                    b1: store.add(p("b1"), Tensor::zeros(&[1, dims.d_ff])),
                    w2: store.add(p("w2"), Tensor::xavier(&[dims.d_ff, d], rng)),
                    b2: store.add(p("b2"), Tensor::zeros(&[1, d])),
                }
            })
            .collect();
        Self {
            dims,
            tok_emb,
            pos_emb,
            blocks,
            lnf_g: store.add("enc.lnf_g", Tensor::filled(&[1, d], 1.0)),
            lnf_b: store.add("enc.lnf_b", Tensor::zeros(&[1, d])),
        }
    }

    pub fn encode(&self, g: &mut Graph, store: &ParamStore, input: &SegmentInput) -> TResult<Encoded> {
        use crate::tensor::TensorError;
        let n = input.tokens.len();
        if n < 3 {
            return Err(TensorError::Invalid {
                op: "encode",
                msg: format!("input of {n} tokens is shorter than the 3 specials"),
            });
        }
        if n > self.dims.max_seq_len {
            return Err(TensorError::Invalid {
                op: "encode",
                msg: format!("input of {n} tokens exceeds max_seq_len {}", self.dims.max_seq_len),
            });
        }
        let d = self.dims.d_model;
        let dh = d / self.dims.heads;
        let scale = 1.0 / (dh as f64).sqrt();

        let tok = g.param(store, self.tok_emb);
        let pos = g.param(store, self.pos_emb);
        let x_tok = g.embedding(tok, &input.tokens)?;
        let positions: Vec<usize> = (0..n).collect();
        let x_pos = g.embedding(pos, &positions)?;
        let mut x = g.add(x_tok, x_pos)?;
        let mut attention = Vec::with_capacity(self.blocks.len() * self.dims.heads);

        for b in &self.blocks {
            let p = |g: &mut Graph, id| g.param(store, id);
            let (g1, b1) = (p(g, b.ln1_g), p(g, b.ln1_b));
            let hn = g.layer_norm(x, g1, b1)?;
            let proj = |g: &mut Graph, w: ParamId, bias: ParamId| -> TResult<Var> {
                let wv = g.param(store, w);
                let bv = g.param(store, bias);
                let y = g.matmul(hn, wv)?;
                g.add_row(y, bv)
            };
            let q = proj(g, b.wq, b.bq)?;
            let k = proj(g, b.wk, b.bk)?;
            let v = proj(g, b.wv, b.bv)?;
            let mut heads = Vec::with_capacity(self.dims.heads);
            for h in 0..self.dims.heads {
                let qh = g.slice_cols(q, h * dh, dh)?;
                let kh = g.slice_cols(k, h * dh, dh)?;
                let vh = g.slice_cols(v, h * dh, dh)?;
                let scores = g.matmul_t(qh, kh)?;
                let scores = g.scale(scores, scale);
                let probs = g.softmax_rows(scores);
                attention.push(probs);
                heads.push(g.matmul(probs, vh)?);
            }
            let cat = if heads.len() == 1 {
                heads[0]
            } else {
                g.concat_cols(&heads)?
            };
            let wo = p(g, b.wo);
            let bo = p(g, b.bo);
            let att = g.matmul(cat, wo)?;
            let att = g.add_row(att, bo)?;
            x = g.add(x, att)?;

            let (g2, b2) = (p(g, b.ln2_g), p(g, b.ln2_b));
            let hn = g.layer_norm(x, g2, b2)?;
            let w1 = p(g, b.w1);
            let bb1 = p(g, b.b1);
            let w2 = p(g, b.w2);
            let bb2 = p(g, b.b2);
            let f = g.matmul(hn, w1)?;
            let f = g.add_row(f, bb1)?;
            let f = g.gelu(f);
            let f = g.matmul(f, w2)?;
            let f = g.add_row(f, bb2)?;
            x = g.add(x, f)?;
        }
        let gf = g.param(store, self.lnf_g);
        let bf = g.param(store, self.lnf_b);
        let h = g.layer_norm(x, gf, bf)?;
        let v = g.slice_rows(h, 0, 1)?;
        Ok(Encoded { h, v, attention })
    }
}
