//! Vocabulary, synthetic long-document QA generation, and dataset files.

use std::collections::HashMap;
use std::fs;
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const CLS: usize = 0;
pub const SEP: usize = 1;
pub const UNK: usize = 2;
pub const PAD: usize = 3;
/// Content id that out-of-vocabulary words map to.
pub const OOV: usize = 4;
/// Marker between a key and its answer.
pub const MARK: usize = 5;
/// Terminator after an answer.
pub const STOP: usize = 6;
const FIRST_SYNTH: usize = 7;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("invalid synthetic config: {0}")]
    Config(String),
    #[error("dataset i/o: {0}")]
    Io(#[from] io::Error),
    #[error("line {line}: {msg}")]
    Record { line: usize, msg: String },
}

/// Bidirectional token ↔ id map. Special tokens occupy ids `0..4`.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocab {
    tokens: Vec<String>,
    ids: HashMap<String, usize>,
    key_range: std::ops::Range<usize>,
    filler_range: std::ops::Range<usize>,
}

impl Vocab {
    /// Vocabulary of the synthetic task with `content_size` generated words.
    /// A quarter of them (at least two) are key words `k*`; the rest are
    /// filler words `w*`.
    pub fn synthetic(content_size: usize) -> Self {
        let keys = (content_size / 4).max(2);
        let fillers = content_size.saturating_sub(keys).max(2);
        let mut tokens: Vec<String> = ["[CLS]", "[SEP]", "[UNK]", "[PAD]", "<oov>", "=>", "."]
            .iter()
            .map(|s| s.to_string())
            .collect();
        tokens.extend((0..keys).map(|i| format!("k{i}")));
        tokens.extend((0..fillers).map(|i| format!("w{i}")));
        let ids = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Self {
            tokens,
            ids,
            key_range: FIRST_SYNTH..FIRST_SYNTH + keys,
            filler_range: FIRST_SYNTH + keys..FIRST_SYNTH + keys + fillers,
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.ids.get(token).copied()
    }

    pub fn token(&self, id: usize) -> &str {
        self.tokens.get(id).map_or("<oov>", String::as_str)
    }

    pub fn tokens(&self, ids: &[usize]) -> Vec<String> {
        ids.iter().map(|&i| self.token(i).to_string()).collect()
    }
}

/// Whitespace tokenisation; unknown words map to [`OOV`].
pub fn tokenize(text: &str, vocab: &Vocab) -> Vec<usize> {
    text.split_whitespace()
        .map(|w| vocab.id(w).unwrap_or(OOV))
        .collect()
}

pub fn detokenize(ids: &[usize], vocab: &Vocab) -> String {
    vocab.tokens(ids).join(" ")
}

/// One question/document pair.
#[derive(Debug, Clone, PartialEq)]
pub struct QAExample {
    pub doc_tokens: Vec<usize>,
    pub question_tokens: Vec<usize>,
    /// Inclusive `(start, end)` token offsets into `doc_tokens`.
    pub answer: Option<(usize, usize)>,
    pub reference_answers: Vec<Vec<String>>,
    pub answerable: bool,
}

impl QAExample {
    /// Checks the answer/flag invariants.
    pub fn validate(&self) -> Result<(), String> {
        match (self.answerable, self.answer) {
            (true, Some((s, e))) => {
                if s > e || e >= self.doc_tokens.len() {
                    return Err(format!(
                        "answer span ({s}, {e}) invalid for document of {} tokens",
                        self.doc_tokens.len()
                    ));
                }
                if self.reference_answers.is_empty() {
                    return Err("answerable example without references".into());
                }
                Ok(())
            }
            (true, None) => Err("answerable example without answer span".into()),
            (false, Some(_)) => Err("unanswerable example with an answer span".into()),
            (false, None) => Ok(()),
        }
    }
}

/// Parameters of the synthetic task.
///
/// Each answerable document embeds `key… => answer… .` where the key is the
/// question. Filler words before the pattern are sometimes replaced by key
/// words (the cue), and distractors repeat the key with its last word
/// swapped.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub vocab_size: usize,
    pub doc_len_min: usize,
    pub doc_len_max: usize,
    pub question_len: usize,
    pub answer_len_min: usize,
    pub answer_len_max: usize,
    /// Range of document offsets where the key pattern may begin.
    pub answer_start_min: usize,
    pub answer_start_max: usize,
    pub distractor_rate: f64,
    /// Width of the cue region preceding the key pattern.
    pub cue_span: usize,
    /// Probability that a filler word inside the cue region becomes a key word.
    pub cue_rate: f64,
    pub unanswerable_fraction: f64,
    pub count: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            vocab_size: 200,
            doc_len_min: 150,
            doc_len_max: 300,
            question_len: 2,
            answer_len_min: 1,
            answer_len_max: 3,
            answer_start_min: 40,
            answer_start_max: 160,
            distractor_rate: 0.3,
            cue_span: 24,
            cue_rate: 0.3,
            unanswerable_fraction: 0.0,
            count: 2000,
            seed: 7,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<(), DataError> {
        let bad = |m: String| Err(DataError::Config(m));
        if self.doc_len_min > self.doc_len_max {
            return bad(format!(
                "doc_len_min {} > doc_len_max {}",
                self.doc_len_min, self.doc_len_max
            ));
        }
        if self.answer_len_min == 0 || self.answer_len_min > self.answer_len_max {
            return bad(format!(
                "answer length range {}..={} is empty",
                self.answer_len_min, self.answer_len_max
            ));
        }
        if self.answer_start_min > self.answer_start_max {
            return bad("answer_start_min > answer_start_max".into());
        }
        if self.question_len == 0 {
            return bad("question_len must be positive".into());
        }
        for (name, p) in [
            ("distractor_rate", self.distractor_rate),
            ("cue_rate", self.cue_rate),
            ("unanswerable_fraction", self.unanswerable_fraction),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return bad(format!("{name} = {p} outside [0, 1]"));
            }
        }
        let pattern = self.question_len + self.answer_len_max + 2;
        if pattern > self.doc_len_min {
            return bad(format!(
                "answer pattern of up to {pattern} tokens does not fit documents of {} tokens",
                self.doc_len_min
            ));
        }
        let vocab = Vocab::synthetic(self.vocab_size);
        if vocab.key_range.len() < self.question_len + 1 {
            return bad(format!(
                "vocab_size {} leaves too few key words for questions of length {}",
                self.vocab_size, self.question_len
            ));
        }
        Ok(())
    }

    pub fn vocab(&self) -> Vocab {
        Vocab::synthetic(self.vocab_size)
    }
}

/// Per-example seed: splitmix64 of the base seed and the index.
pub fn derive_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn generate_synthetic(config: &SynthConfig) -> Result<Vec<QAExample>, DataError> {
    config.validate()?;
    let vocab = config.vocab();
    Ok((0..config.count)
        .map(|i| generate_one(config, &vocab, derive_seed(config.seed, i as u64)))
        .collect())
}

fn generate_one(config: &SynthConfig, vocab: &Vocab, seed: u64) -> QAExample {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let fillers = vocab.filler_range.clone();
    let keys: Vec<usize> = vocab.key_range.clone().collect();

    let doc_len = rng.gen_range(config.doc_len_min..=config.doc_len_max);
    let mut doc: Vec<usize> = (0..doc_len)
        .map(|_| rng.gen_range(fillers.clone()))
        .collect();
    let question: Vec<usize> = keys
        .choose_multiple(&mut rng, config.question_len)
        .copied()
        .collect();
    let answerable = !rng.gen_bool(config.unanswerable_fraction);

    let mut occupied: Option<(usize, usize)> = None;
    let mut answer = None;
    let mut refs = Vec::new();
    if answerable {
        let len = rng.gen_range(config.answer_len_min..=config.answer_len_max);
        let pattern_len = config.question_len + len + 2;
        let hi = config.answer_start_max.min(doc_len - pattern_len);
        let lo = config.answer_start_min.min(hi);
        let start = rng.gen_range(lo..=hi);
        let cue_lo = start.saturating_sub(config.cue_span);
        for slot in &mut doc[cue_lo..start] {
            if rng.gen_bool(config.cue_rate) {
                *slot = question[rng.gen_range(0..question.len())];
            }
        }
        doc[start..start + config.question_len].copy_from_slice(&question);
        doc[start + config.question_len] = MARK;
        let a0 = start + config.question_len + 1;
        let a1 = a0 + len - 1;
        doc[a1 + 1] = STOP;
        answer = Some((a0, a1));
        refs.push(vocab.tokens(&doc[a0..=a1]));
        occupied = Some((cue_lo, start + pattern_len));
    }

    if rng.gen_bool(config.distractor_rate) {
        let len = rng.gen_range(config.answer_len_min..=config.answer_len_max);
        let plen = config.question_len + len + 2;
        // Key with its last word replaced by a different key word.
        let mut fake = question.clone();
        let last = fake.len() - 1;
        loop {
            let k = keys[rng.gen_range(0..keys.len())];
            if !question.contains(&k) {
                fake[last] = k;
                break;
            }
        }
        let candidates: Vec<usize> = (0..=doc_len - plen)
            .filter(|&s| occupied.map_or(true, |(lo, hi)| s + plen <= lo || s >= hi))
            .collect();
        if let Some(&s) = candidates.choose(&mut rng) {
            doc[s..s + fake.len()].copy_from_slice(&fake);
            doc[s + fake.len()] = MARK;
            doc[s + plen - 1] = STOP;
        }
    }

    QAExample {
        doc_tokens: doc,
        question_tokens: question,
        answer,
        reference_answers: refs,
        answerable,
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Record {
    doc: String,
    question: String,
    answer_start: Option<usize>,
    answer_end: Option<usize>,
    answerable: bool,
    refs: Vec<String>,
}

fn to_record(ex: &QAExample, vocab: &Vocab) -> Record {
    Record {
        doc: detokenize(&ex.doc_tokens, vocab),
        question: detokenize(&ex.question_tokens, vocab),
        answer_start: ex.answer.map(|a| a.0),
        answer_end: ex.answer.map(|a| a.1),
        answerable: ex.answerable,
        refs: ex.reference_answers.iter().map(|r| r.join(" ")).collect(),
    }
}

fn from_record(r: Record, vocab: &Vocab) -> Result<QAExample, String> {
    let answer = match (r.answer_start, r.answer_end) {
        (Some(s), Some(e)) => Some((s, e)),
        (None, None) => None,
        _ => return Err("answer_start and answer_end must both be set or both null".into()),
    };
    let ex = QAExample {
        doc_tokens: tokenize(&r.doc, vocab),
        question_tokens: tokenize(&r.question, vocab),
        answer,
        reference_answers: r
            .refs
            .iter()
            .map(|s| s.split_whitespace().map(str::to_string).collect())
            .collect(),
        answerable: r.answerable,
    };
    ex.validate()?;
    Ok(ex)
}

/// Writes one JSON record per line.
pub fn save_dataset(path: &Path, examples: &[QAExample], vocab: &Vocab) -> Result<(), DataError> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    for ex in examples {
        let line = serde_json::to_string(&to_record(ex, vocab)).expect("record serialises");
        writeln!(w, "{line}")?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_dataset(path: &Path, vocab: &Vocab) -> Result<Vec<QAExample>, DataError> {
    let reader = BufReader::new(fs::File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: Record = serde_json::from_str(&line).map_err(|e| DataError::Record {
            line: i + 1,
            msg: e.to_string(),
        })?;
        out.push(from_record(record, vocab).map_err(|msg| DataError::Record { line: i + 1, msg })?);
    }
    Ok(out)
}

/// Count, mean and max document length.
pub fn length_stats(examples: &[QAExample]) -> (usize, f64, usize) {
    let n = examples.len();
    let total: usize = examples.iter().map(|e| e.doc_tokens.len()).sum();
    let max = examples.iter().map(|e| e.doc_tokens.len()).max().unwrap_or(0);
    let mean = if n == 0 { 0.0 } else { total as f64 / n as f64 };
    (n, mean, max)
}
