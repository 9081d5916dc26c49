//! Synthetic span-extraction task: dataset generation, span decoding and EM/F1.
//!
//! Every example is laid out as `[CLS] query [SEP] context`, with segment 0
//! on the query side (including `[CLS]` and `[SEP]`) and 1 on the context.
//! Answerable examples contain the query exactly once in the context; the
//! gold span covers that occurrence. `(0, 0)` means "no answer".

use std::io::{BufRead, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub const CLS: usize = 1;
pub const SEP: usize = 2;
/// First id used for ordinary words; ids below it are reserved.
pub const FIRST_WORD: usize = 4;
pub const NO_ANSWER: (usize, usize) = (0, 0);
pub const DEFAULT_MAX_ANSWER_LEN: usize = 30;
const MAX_TRIES: usize = 1000;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SpanExample {
    pub tokens: Vec<usize>,
    pub segments: Vec<usize>,
    pub gold: (usize, usize),
}

impl SpanExample {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn is_answerable(&self) -> bool {
        self.gold != NO_ANSWER
    }

    pub fn validate(&self) -> Result<()> {
        let len = self.tokens.len();
        if len == 0 || self.segments.len() != len {
            return Err(Error::Dataset("tokens and segments must be non-empty and equally long".into()));
        }
        if self.is_answerable() {
            let (s, e) = self.gold;
            if !(1 <= s && s <= e && e < len) {
                return Err(Error::Dataset(format!("gold span {:?} invalid for length {len}", self.gold)));
            }
            if self.segments[s..=e].iter().any(|&g| g != 1) {
                return Err(Error::Dataset(format!("gold span {:?} leaves the context", self.gold)));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DatasetConfig {
    pub count: usize,
    pub seq_len: usize,
    pub vocab_size: usize,
    /// Inclusive range of query (needle) lengths.
    pub needle_len: (usize, usize),
    pub unanswerable_fraction: f64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            count: 2000,
            seq_len: 64,
            vocab_size: 64,
            needle_len: (1, 1),
            unanswerable_fraction: 1.0 / 3.0,
        }
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.needle_len;
        if lo == 0 || lo > hi {
            return Err(Error::Dataset(format!("bad needle length range {lo}..={hi}")));
        }
        if self.seq_len < 2 + 2 * hi {
            return Err(Error::Dataset(format!(
                "sequence length {} cannot hold a query and context of length {hi}",
                self.seq_len
            )));
        }
        if self.vocab_size <= FIRST_WORD {
            return Err(Error::Dataset(format!("vocabulary of {} has no word ids", self.vocab_size)));
        }
        if !(0.0..=1.0).contains(&self.unanswerable_fraction) {
            return Err(Error::Dataset("unanswerable_fraction must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

fn occurrences(context: &[usize], needle: &[usize]) -> usize {
    context.windows(needle.len()).filter(|w| *w == needle).count()
}

fn sample_example(rng: &mut ChaCha8Rng, config: &DatasetConfig) -> Result<SpanExample> {
    let (lo, hi) = config.needle_len;
    let k = rng.gen_range(lo..=hi);
    let word = |rng: &mut ChaCha8Rng| rng.gen_range(FIRST_WORD..config.vocab_size);
    let needle: Vec<usize> = (0..k).map(|_| word(rng)).collect();
    let context_len = config.seq_len - 2 - k;
    let answerable = rng.gen::<f64>() >= config.unanswerable_fraction;
    for _ in 0..MAX_TRIES {
        let mut context: Vec<usize> = (0..context_len).map(|_| word(rng)).collect();
        let at = if answerable {
            let at = rng.gen_range(0..=context_len - k);
            context[at..at + k].copy_from_slice(&needle);
            Some(at)
        } else {
            None
        };
        let found = occurrences(&context, &needle);
        if found != usize::from(answerable) {
            continue;
        }
        let offset = k + 2;
        let mut tokens = Vec::with_capacity(config.seq_len);
        tokens.push(CLS);
        tokens.extend_from_slice(&needle);
        tokens.push(SEP);
        tokens.extend_from_slice(&context);
        let mut segments = vec![0; offset];
        segments.resize(config.seq_len, 1);
        let gold = at.map_or(NO_ANSWER, |a| (offset + a, offset + a + k - 1));
        return Ok(SpanExample { tokens, segments, gold });
    }
    Err(Error::Dataset(format!(
        "no valid context after {MAX_TRIES} tries (vocabulary {} too small for needle length {k}?)",
        config.vocab_size
    )))
}

/// Deterministic synthetic dataset for `seed`.
pub fn generate_dataset(seed: u64, config: &DatasetConfig) -> Result<Vec<SpanExample>> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..config.count).map(|_| sample_example(&mut rng, config)).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpanPrediction {
    pub span: (usize, usize),
    pub score: f64,
    pub start_logits: Vec<f64>,
    pub end_logits: Vec<f64>,
}

/// Best `(s, e)` with `1 ≤ s ≤ e < L` and `e − s < max_answer_len` by
/// `start[s] + end[e]`, or `(0, 0)` when the null score `start[0] + end[0]`
/// is at least as good. Ties go to the earlier start, then the shorter span.
#[allow(clippy::needless_range_loop)]
pub fn decode_span(start_logits: &[f64], end_logits: &[f64], max_answer_len: usize) -> SpanPrediction {
    let len = start_logits.len().min(end_logits.len());
    let mut best: Option<((usize, usize), f64)> = None;
    for s in 1..len {
        for e in s..len.min(s + max_answer_len) {
            let score = start_logits[s] + end_logits[e];
            if best.is_none_or(|(_, b)| score > b) {
                best = Some(((s, e), score));
            }
        }
    }
    let null = if len == 0 { 0.0 } else { start_logits[0] + end_logits[0] };
    let (span, score) = match best {
        Some((span, b)) if b > null => (span, b),
        _ => (NO_ANSWER, null),
    };
    SpanPrediction {
        span,
        score,
        start_logits: start_logits.to_vec(),
        end_logits: end_logits.to_vec(),
    }
}

/// Exact match of a single prediction.
pub fn span_em(pred: (usize, usize), gold: (usize, usize)) -> f64 {
    f64::from(u8::from(pred == gold))
}

/// Token-position overlap F1 of a single prediction.
pub fn span_f1(pred: (usize, usize), gold: (usize, usize)) -> f64 {
    if gold == NO_ANSWER || pred == NO_ANSWER {
        return span_em(pred, gold);
    }
    let lo = pred.0.max(gold.0);
    let hi = pred.1.min(gold.1);
    if hi < lo {
        return 0.0;
    }
    let overlap = (hi - lo + 1) as f64;
    let precision = overlap / (pred.1 - pred.0 + 1) as f64;
    let recall = overlap / (gold.1 - gold.0 + 1) as f64;
    2.0 * precision * recall / (precision + recall)
}

/// Dataset-level means, as fractions in `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Scores {
    pub em: f64,
    pub f1: f64,
}

impl Scores {
    pub fn em_percent(&self) -> f64 {
        100.0 * self.em
    }

    pub fn f1_percent(&self) -> f64 {
        100.0 * self.f1
    }
}

pub fn score(predictions: &[(usize, usize)], golds: &[(usize, usize)]) -> Result<Scores> {
    if predictions.len() != golds.len() {
        return Err(Error::invalid(
            "score",
            format!("{} predictions for {} examples", predictions.len(), golds.len()),
        ));
    }
    if golds.is_empty() {
        return Ok(Scores { em: 0.0, f1: 0.0 });
    }
    let n = golds.len() as f64;
    let (em, f1) = predictions
        .iter()
        .zip(golds)
        .fold((0.0, 0.0), |(em, f1), (&p, &g)| (em + span_em(p, g), f1 + span_f1(p, g)));
    Ok(Scores { em: em / n, f1: f1 / n })
}

fn join(ids: &[usize]) -> String {
    ids.iter().map(usize::to_string).collect::<Vec<_>>().join(" ")
}

/// Writes one example per line: `tokens<TAB>segments<TAB>start end`, with
/// ids space-separated.
pub fn write_dataset(mut out: impl Write, examples: &[SpanExample]) -> Result<()> {
    for ex in examples {
        writeln!(out, "{}\t{}\t{} {}", join(&ex.tokens), join(&ex.segments), ex.gold.0, ex.gold.1)?;
    }
    Ok(())
}

pub fn read_dataset(input: impl BufRead) -> Result<Vec<SpanExample>> {
    let mut examples = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let err = |message: String| Error::Parse { line: i + 1, message };
        let ids = |field: &str| {
            field
                .split_ascii_whitespace()
                .map(|t| t.parse::<usize>().map_err(|e| err(format!("bad id `{t}`: {e}"))))
                .collect::<Result<Vec<_>>>()
        };
        let fields: Vec<&str> = line.split('\t').collect();
        let [tokens, segments, span] = fields[..] else {
            return Err(err(format!("expected 3 tab-separated fields, got {}", fields.len())));
        };
        let span = ids(span)?;
        let [s, e] = span[..] else {
            return Err(err("gold span needs two ids".into()));
        };
        let ex = SpanExample {
            tokens: ids(tokens)?,
            segments: ids(segments)?,
            gold: (s, e),
        };
        ex.validate().map_err(|e| err(e.to_string()))?;
        examples.push(ex);
    }
    Ok(examples)
}
