//! Mini-batch Adam training with freeze-aware updates, evaluation and timing.

use std::io::Write;
use std::time::Instant;

use indexmap::IndexMap;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::Tape;
use crate::encoder::{BoundParams, EncoderInput, ParameterRegistry};
use crate::error::{Error, Result};
use crate::model::{span_logits, ModelConfig};
use crate::span::{decode_span, score, SpanExample, DEFAULT_MAX_ANSWER_LEN};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub seed: u64,
    pub max_answer_len: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 8,
            epochs: 3,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            seed: 0,
            max_answer_len: DEFAULT_MAX_ANSWER_LEN,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.epochs == 0 || self.max_answer_len == 0 {
            return Err(Error::Config("batch_size, epochs and max_answer_len must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if !((0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2) && self.eps > 0.0) {
            return Err(Error::Config("adam betas must lie in [0, 1) and eps be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossRecord {
    /// 1-based optimizer step.
    pub step: usize,
    /// 0-based epoch.
    pub epoch: usize,
    pub loss: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub train_seconds: f64,
    pub losses: Vec<LossRecord>,
}

/// Adam with moment buffers for trainable parameters only.
#[derive(Debug, Clone)]
pub struct Adam {
    config: TrainConfig,
    moments: IndexMap<String, (Vec<f64>, Vec<f64>)>,
    steps: i32,
}

impl Adam {
    pub fn new(registry: &ParameterRegistry, config: &TrainConfig) -> Self {
        let moments = registry
            .iter()
            .filter(|(_, p)| p.trainable)
            .map(|(n, p)| (n.to_string(), (vec![0.0; p.numel()], vec![0.0; p.numel()])))
            .collect();
        Self {
            config: *config,
            moments,
            steps: 0,
        }
    }

    /// Number of values held in moment buffers (two per trainable parameter value).
    pub fn state_len(&self) -> usize {
        self.moments.values().map(|(m, v)| m.len() + v.len()).sum()
    }

    /// Applies one update from `grads`; parameters without an entry here are never touched.
    pub fn update(&mut self, registry: &mut ParameterRegistry, grads: &IndexMap<String, Vec<f64>>) -> Result<()> {
        self.steps += 1;
        let c = &self.config;
        let bias1 = 1.0 - c.beta1.powi(self.steps);
        let bias2 = 1.0 - c.beta2.powi(self.steps);
        for (name, (m, v)) in &mut self.moments {
            let Some(g) = grads.get(name) else { continue };
            let p = registry.get_mut(name)?;
            if !p.trainable {
                return Err(Error::invalid("adam", format!("`{name}` was frozen after the optimizer was built")));
            }
            for i in 0..g.len() {
                m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g[i];
                v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g[i] * g[i];
                let m_hat = m[i] / bias1;
                let v_hat = v[i] / bias2;
                p.values[i] -= c.learning_rate * m_hat / (v_hat.sqrt() + c.eps);
            }
        }
        Ok(())
    }
}

fn input(ex: &SpanExample) -> EncoderInput<'_> {
    EncoderInput {
        tokens: &ex.tokens,
        segments: &ex.segments,
        attention_mask: None,
    }
}

/// Mean over the batch of `(CE(start) + CE(end)) / 2`, with gradients for trainable parameters.
pub fn batch_loss_and_grads(
    registry: &ParameterRegistry,
    model: &ModelConfig,
    batch: &[&SpanExample],
) -> Result<(f64, IndexMap<String, Vec<f64>>)> {
    if batch.is_empty() {
        return Err(Error::invalid("train", "empty batch"));
    }
    let mut tape = Tape::new();
    let params = BoundParams::bind(&mut tape, registry)?;
    let mut terms = Vec::with_capacity(2 * batch.len());
    for ex in batch {
        let (start, end) = span_logits(&mut tape, &params, model, input(ex))?;
        terms.push(tape.cross_entropy(start, ex.gold.0)?);
        terms.push(tape.cross_entropy(end, ex.gold.1)?);
    }
    let stacked = tape.concat(&terms, 0)?;
    let total = tape.sum(stacked);
    let loss = tape.scale(total, 0.5 / batch.len() as f64);
    let value = tape.data(loss)[0];
    tape.backward(loss);
    let grads = params
        .iter()
        .filter_map(|(name, v)| tape.grad(v).map(|g| (name.to_string(), g.to_vec())))
        .collect();
    Ok((value, grads))
}

/// Loss on a batch without building gradients.
pub fn batch_loss(registry: &ParameterRegistry, model: &ModelConfig, batch: &[&SpanExample]) -> Result<f64> {
    Ok(batch_loss_and_grads(registry, model, batch)?.0)
}

/// Trains `registry` in place. Freeze flags must already be set.
pub fn train(
    registry: &mut ParameterRegistry,
    model: &ModelConfig,
    dataset: &[SpanExample],
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(Error::Dataset("cannot train on an empty dataset".into()));
    }
    let started = Instant::now();
    let mut adam = Adam::new(registry, config);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut losses = Vec::new();
    let mut step = 0;
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(config.batch_size) {
            step += 1;
            let batch: Vec<&SpanExample> = chunk.iter().map(|&i| &dataset[i]).collect();
            let (loss, grads) = batch_loss_and_grads(registry, model, &batch)?;
            if !loss.is_finite() || grads.values().flatten().any(|g| !g.is_finite()) {
                return Err(Error::Divergence { step });
            }
            adam.update(registry, &grads)?;
            losses.push(LossRecord { step, epoch, loss });
        }
    }
    Ok(TrainOutcome {
        train_seconds: started.elapsed().as_secs_f64(),
        losses,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub em_percent: f64,
    pub f1_percent: f64,
    pub inference_seconds: f64,
    pub predictions: Vec<(usize, usize)>,
}

/// Forward, decode and score over `dataset`; timing covers forward and decode only.
pub fn evaluate(
    registry: &ParameterRegistry,
    model: &ModelConfig,
    dataset: &[SpanExample],
    config: &TrainConfig,
) -> Result<Evaluation> {
    let started = Instant::now();
    let mut predictions = Vec::with_capacity(dataset.len());
    for chunk in dataset.chunks(config.batch_size.max(1)) {
        let mut tape = Tape::new();
        let params = BoundParams::bind(&mut tape, registry)?;
        for ex in chunk {
            let (start, end) = span_logits(&mut tape, &params, model, input(ex))?;
            predictions.push(decode_span(tape.data(start), tape.data(end), config.max_answer_len).span);
        }
    }
    let inference_seconds = started.elapsed().as_secs_f64();
    let golds: Vec<_> = dataset.iter().map(|ex| ex.gold).collect();
    let scores = score(&predictions, &golds)?;
    Ok(Evaluation {
        em_percent: scores.em_percent(),
        f1_percent: scores.f1_percent(),
        inference_seconds,
        predictions,
    })
}

/// Decodes and scores precomputed `(start, end)` logits.
pub fn evaluate_logits(
    logits: &[(Vec<f64>, Vec<f64>)],
    golds: &[(usize, usize)],
    max_answer_len: usize,
) -> Result<(f64, f64)> {
    let preds: Vec<_> = logits
        .iter()
        .map(|(s, e)| decode_span(s, e, max_answer_len).span)
        .collect();
    let s = score(&preds, golds)?;
    Ok((s.em_percent(), s.f1_percent()))
}

/// `(F1 − 50) / log10(N)`, with F1 on the 0–100 scale.
///
/// Values in `(0, 1]` are rejected as probable fractions.
pub fn efficiency_ratio(f1_percent: f64, trainable_count: u64) -> Result<f64> {
    if !(0.0..=100.0).contains(&f1_percent) {
        return Err(Error::invalid("efficiency_ratio", format!("F1 {f1_percent} is outside 0–100")));
    }
    if f1_percent > 0.0 && f1_percent <= 1.0 {
        return Err(Error::invalid(
            "efficiency_ratio",
            format!("F1 {f1_percent} looks like a fraction; pass a percentage"),
        ));
    }
    ratio(f1_percent, trainable_count)
}

fn ratio(f1_percent: f64, trainable_count: u64) -> Result<f64> {
    if trainable_count < 2 {
        return Err(Error::invalid("efficiency_ratio", "need at least 2 trainable parameters"));
    }
    Ok((f1_percent - 50.0) / (trainable_count as f64).log10())
}

impl Evaluation {
    /// Efficiency ratio of this evaluation's F1, which is known to be a percentage,
    /// so low scores are not mistaken for fractions.
    pub fn efficiency_ratio(&self, trainable_count: u64) -> Result<f64> {
        ratio(self.f1_percent, trainable_count)
    }
}

/// `step,epoch,loss` with a header line.
pub fn write_loss_csv(mut out: impl Write, losses: &[LossRecord]) -> Result<()> {
    writeln!(out, "step,epoch,loss")?;
    for r in losses {
        writeln!(out, "{},{},{}", r.step, r.epoch, r.loss)?;
    }
    Ok(())
}
