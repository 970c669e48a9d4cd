//! Corpora and synthetic tasks.

use alloc::vec;
use alloc::vec::Vec;

use super::model::{argmax, forward, sequence_nll, ModelParams, ToyModelConfig};
use crate::error::{Error, Result};
use crate::numerics::{fmath, Rng};

/// One training sequence: inputs, next-token targets and per-position loss
/// weights.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub tokens: Vec<usize>,
    pub targets: Vec<usize>,
    pub weights: Vec<f64>,
}

impl Sample {
    /// Next-token prediction over `seq` (inputs are all but the last token).
    pub fn next_token(seq: &[usize]) -> Self {
        let n = seq.len().saturating_sub(1);
        Self {
            tokens: seq[..n].to_vec(),
            targets: seq[1..].to_vec(),
            weights: vec![1.0; n],
        }
    }
}

/// Byte that separates documents in a corpus file.
pub const RECORD_SEPARATOR: u8 = 0x1e;

/// A tokenized corpus split into documents.
#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    docs: Vec<Vec<usize>>,
    vocab: usize,
}

impl Corpus {
    /// Byte-level tokens; documents are separated by [`RECORD_SEPARATOR`].
    pub fn from_bytes(bytes: &[u8]) -> Self {
        let docs = bytes
            .split(|&b| b == RECORD_SEPARATOR)
            .filter(|d| !d.is_empty())
            .map(|d| d.iter().map(|&b| b as usize).collect())
            .collect();
        Self { docs, vocab: 256 }
    }

    pub fn from_docs(docs: Vec<Vec<usize>>, vocab: usize) -> Result<Self> {
        if docs.iter().flatten().any(|&t| t >= vocab) {
            return Err(Error::InvalidArgument("token outside the vocabulary"));
        }
        Ok(Self { docs, vocab })
    }

    /// `0, 1, ..., symbols - 1, 0, 1, ...` as a single document.
    pub fn repeating(symbols: usize, len: usize) -> Self {
        Self {
            docs: vec![(0..len).map(|i| i % symbols).collect()],
            vocab: symbols,
        }
    }

    pub fn vocab(&self) -> usize {
        self.vocab
    }

    pub fn docs(&self) -> &[Vec<usize>] {
        &self.docs
    }

    pub fn total_tokens(&self) -> usize {
        self.docs.iter().map(Vec::len).sum()
    }

    /// Splits every document at `1 - held_out` of its length.
    pub fn split(&self, held_out: f64) -> (Corpus, Corpus) {
        let mut train = Vec::new();
        let mut test = Vec::new();
        for d in &self.docs {
            let cut = fmath::floor(d.len() as f64 * (1.0 - held_out)) as usize;
            train.push(d[..cut].to_vec());
            test.push(d[cut..].to_vec());
        }
        let keep = |v: Vec<Vec<usize>>| v.into_iter().filter(|d| !d.is_empty()).collect();
        (
            Corpus {
                docs: keep(train),
                vocab: self.vocab,
            },
            Corpus {
                docs: keep(test),
                vocab: self.vocab,
            },
        )
    }

    /// Random window of `context + 1` tokens from a document long enough to
    /// hold it. Shorter documents are skipped, never packed together.
    pub fn sample(&self, rng: &mut Rng, context: usize) -> Result<Sample> {
        let usable: Vec<&Vec<usize>> = self.docs.iter().filter(|d| d.len() > context).collect();
        if usable.is_empty() {
            return Err(Error::InvalidArgument("no document is longer than the context"));
        }
        let doc = usable[rng.below(usable.len())];
        let start = rng.below(doc.len() - context);
        Ok(Sample::next_token(&doc[start..start + context + 1]))
    }
}

/// Perplexity over non-overlapping windows of each document.
pub fn eval_ppl(cfg: &ToyModelConfig, params: &ModelParams, corpus: &Corpus) -> Result<f64> {
    let mut nll = 0.0;
    let mut count = 0;
    for doc in corpus.docs() {
        let mut start = 0;
        while start + 1 < doc.len() {
            let end = (start + cfg.context).min(doc.len() - 1);
            let (l, c) = sequence_nll(cfg, params, &doc[start..end], &doc[start + 1..end + 1])?;
            nll += l;
            count += c;
            start = end;
        }
    }
    if count == 0 {
        return Err(Error::InvalidArgument("empty corpus"));
    }
    Ok(fmath::exp(nll / count as f64))
}

/// Long-range recall language modeling.
///
/// Filler follows `x_i = (x_{i-2} + e) mod 16` with a fair coin `e`, so it
/// rewards access to recent tokens. Early in every
/// sequence a `KEY` marker is followed by a random value token; near the end
/// several `QUERY` markers are each followed by that same value.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RecallTask {
    pub context: usize,
    pub queries: usize,
}

impl RecallTask {
    pub const FILLER: usize = 16;
    pub const VALUES: usize = 8;
    pub const KEY: usize = 24;
    pub const QUERY: usize = 25;
    pub const VOCAB: usize = 26;

    pub fn new(context: usize) -> Self {
        Self { context, queries: 4 }
    }

    pub fn sample(&self, rng: &mut Rng) -> Result<Sample> {
        let len = self.context + 1;
        if len < 8 * (self.queries + 1) {
            return Err(Error::InvalidArgument("context too short for the recall task"));
        }
        let value = Self::FILLER + rng.below(Self::VALUES);
        let key_at = rng.below(len / 4);
        let mut special = vec![None; len];
        special[key_at] = Some(Self::KEY);
        special[key_at + 1] = Some(value);
        let tail = 3 * len / 4;
        let slots = (len - 1 - tail) / 2;
        let mut picks: Vec<usize> = (0..slots).collect();
        rng.shuffle(&mut picks);
        for &s in picks.iter().take(self.queries) {
            special[tail + 2 * s] = Some(Self::QUERY);
            special[tail + 2 * s + 1] = Some(value);
        }
        let (mut a, mut b) = (rng.below(Self::FILLER), rng.below(Self::FILLER));
        let seq: Vec<usize> = special
            .iter()
            .map(|s| match s {
                Some(t) => *t,
                None => {
                    let c = (a + rng.below(2)) % Self::FILLER;
                    a = b;
                    b = c;
                    c
                }
            })
            .collect();
        Ok(Sample::next_token(&seq))
    }
}

/// A passkey retrieval instance.
#[derive(Debug, Clone, PartialEq)]
pub struct PasskeyInstance {
    /// Input tokens; the last one is the query marker.
    pub tokens: Vec<usize>,
    pub answer: usize,
    /// Position whose next-token prediction must be the answer.
    pub answer_pos: usize,
    /// Distance from the passkey digit to the query.
    pub distance: usize,
}

pub const PASSKEY_FILLER: usize = 16;
pub const PASSKEY_MARK: usize = 16;
pub const PASSKEY_QUERY: usize = 17;
pub const PASSKEY_DIGIT0: usize = 18;
pub const PASSKEY_VOCAB: usize = 28;

/// Passkey placed at a random distance beyond the window.
pub fn make_passkey_task(rng: &mut Rng, context_len: usize, window: usize) -> Result<PasskeyInstance> {
    if context_len <= window + 3 {
        return Err(Error::InvalidArgument("context must exceed the window"));
    }
    let distance = window + 1 + rng.below(context_len - window - 2);
    make_passkey_at(rng, context_len, distance)
}

/// Passkey at exactly `distance` positions before the query.
pub fn make_passkey_at(rng: &mut Rng, context_len: usize, distance: usize) -> Result<PasskeyInstance> {
    if distance == 0 || distance + 2 > context_len {
        return Err(Error::InvalidArgument("passkey distance does not fit the context"));
    }
    let phase = rng.below(PASSKEY_FILLER);
    let mut tokens: Vec<usize> = (0..context_len).map(|i| (phase + i) % PASSKEY_FILLER).collect();
    let answer = PASSKEY_DIGIT0 + rng.below(10);
    let query = context_len - 1;
    tokens[query - distance - 1] = PASSKEY_MARK;
    tokens[query - distance] = answer;
    tokens[query] = PASSKEY_QUERY;
    Ok(PasskeyInstance {
        tokens,
        answer,
        answer_pos: query,
        distance,
    })
}

impl PasskeyInstance {
    pub fn sample(&self) -> Sample {
        let mut seq = self.tokens.clone();
        seq.push(self.answer);
        Sample::next_token(&seq)
    }
}

/// Fraction of instances whose answer is the model's top prediction.
pub fn passkey_accuracy(cfg: &ToyModelConfig, params: &ModelParams, tasks: &[PasskeyInstance]) -> Result<f64> {
    if tasks.is_empty() {
        return Err(Error::InvalidArgument("no passkey instances"));
    }
    let mut hits = 0;
    for t in tasks {
        let fwd = forward(cfg, params, &t.tokens, false)?;
        if argmax(fwd.logits.row(t.answer_pos)) == t.answer {
            hits += 1;
        }
    }
    Ok(hits as f64 / tasks.len() as f64)
}
