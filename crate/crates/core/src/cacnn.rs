//! Context-aware convolutional heads.
//!
//! Both variants synthesize a per-example bank of convolution filters from
//! the example's own first-stage feature maps and convolve it with the
//! encoder output. The synthesized filters are activations, not parameters:
//! gradients reach the first-stage filters through them.

use crate::autograd::{Padding, Tape, Var};
use crate::encoder::{BoundParams, ParameterRegistry};
use crate::error::{Error, Result};

pub const INITIAL_WEIGHT: &str = "head.cacnn.initial.weight";
pub const INITIAL_BIAS: &str = "head.cacnn.initial.bias";
pub const CONTEXT_WEIGHT: &str = "head.cacnn.context.weight";
pub const CONTEXT_BIAS: &str = "head.cacnn.context.bias";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CacnnVariant {
    /// Stage-1 maps are reduced over the sequence into a context vector,
    /// convolved again, and tiled into filters.
    ContextVector,
    /// Stage-1 maps are flattened and the leading values split into filters.
    Simplified,
}

/// How the context vector reduces stage-1 maps over the sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reduction {
    Max,
    Sum,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CacnnConfig {
    pub variant: CacnnVariant,
    /// `n_f`
    pub initial_filters: usize,
    /// `w1`
    pub initial_width: usize,
    /// `w_c`, context-vector variant only.
    pub context_width: usize,
    /// `m`, context-vector variant only.
    pub context_filters: usize,
    /// `K`, feature maps per example.
    pub sample_filters: usize,
    /// `w2`
    pub sample_width: usize,
    pub reduction: Reduction,
    /// Insert a relu between the stage-1 convolution and filter synthesis.
    pub relu_between: bool,
}

impl CacnnConfig {
    pub fn context_vector(n_f: usize, w1: usize, w_c: usize, m: usize, k: usize, w2: usize) -> Self {
        Self {
            variant: CacnnVariant::ContextVector,
            initial_filters: n_f,
            initial_width: w1,
            context_width: w_c,
            context_filters: m,
            sample_filters: k,
            sample_width: w2,
            reduction: Reduction::Max,
            relu_between: false,
        }
    }

    pub fn simplified(n_f: usize, w1: usize, k: usize, w2: usize) -> Self {
        Self {
            variant: CacnnVariant::Simplified,
            initial_filters: n_f,
            initial_width: w1,
            context_width: 0,
            context_filters: 0,
            sample_filters: k,
            sample_width: w2,
            reduction: Reduction::Max,
            relu_between: false,
        }
    }

    /// Number of values needed to fill the synthesized filter bank, `K·w2·H`.
    pub fn filter_values(&self, hidden: usize) -> usize {
        self.sample_filters * self.sample_width * hidden
    }

    /// Checks the configuration for a hidden size and, for the simplified
    /// variant, the sequence length it will run at.
    pub fn validate(&self, hidden: usize, seq_len: Option<usize>) -> Result<()> {
        let positive = [
            ("n_f", self.initial_filters),
            ("w1", self.initial_width),
            ("K", self.sample_filters),
            ("w2", self.sample_width),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("cacnn {name} must be positive")));
        }
        match self.variant {
            CacnnVariant::ContextVector => {
                if self.context_filters == 0 || self.context_width == 0 {
                    return Err(Error::Config("cacnn m and w_c must be positive".into()));
                }
                if self.context_width > self.initial_filters {
                    return Err(Error::Config(format!(
                        "cacnn context width w_c={} exceeds n_f={}",
                        self.context_width, self.initial_filters
                    )));
                }
            }
            CacnnVariant::Simplified => {
                if let Some(len) = seq_len {
                    let have = len * self.initial_filters;
                    let need = self.filter_values(hidden);
                    if have < need {
                        return Err(Error::Config(format!(
                            "simplified cacnn needs L·n_f ≥ K·w2·H, got {len}·{} = {have} < {need}",
                            self.initial_filters
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    /// Trainable head parameters including the final `K→2` affine layer.
    pub fn param_count(&self, hidden: usize) -> u64 {
        let (n_f, w1, h) = (self.initial_filters as u64, self.initial_width as u64, hidden as u64);
        let stage1 = n_f * (w1 * h + 1);
        let context = match self.variant {
            CacnnVariant::ContextVector => self.context_filters as u64 * (self.context_width as u64 + 1),
            CacnnVariant::Simplified => 0,
        };
        stage1 + context + 2 * self.sample_filters as u64 + 2
    }

    /// Parameter names and shapes, excluding the affine span layer.
    pub fn param_shapes(&self, hidden: usize) -> Vec<(&'static str, Vec<usize>)> {
        let mut shapes = vec![
            (INITIAL_WEIGHT, vec![self.initial_filters, self.initial_width, hidden]),
            (INITIAL_BIAS, vec![self.initial_filters]),
        ];
        if self.variant == CacnnVariant::ContextVector {
            shapes.push((CONTEXT_WEIGHT, vec![self.context_filters, self.context_width, 1]));
            shapes.push((CONTEXT_BIAS, vec![self.context_filters]));
        }
        shapes
    }
}

/// Tape handles for the convolution parameters of a CACNN head.
#[derive(Debug, Clone, Copy)]
pub struct CacnnParams {
    pub initial_weight: Var,
    pub initial_bias: Var,
    pub context_weight: Option<Var>,
    pub context_bias: Option<Var>,
}

impl CacnnParams {
    pub fn from_bound(params: &BoundParams, config: &CacnnConfig) -> Result<Self> {
        let context = config.variant == CacnnVariant::ContextVector;
        Ok(Self {
            initial_weight: params.get(INITIAL_WEIGHT)?,
            initial_bias: params.get(INITIAL_BIAS)?,
            context_weight: context.then(|| params.get(CONTEXT_WEIGHT)).transpose()?,
            context_bias: context.then(|| params.get(CONTEXT_BIAS)).transpose()?,
        })
    }
}

/// Stage 1: same-padded convolution plus bias, optionally rectified. `[L×n_f]`.
fn initial_maps(tape: &mut Tape, config: &CacnnConfig, p: &CacnnParams, x: Var) -> Result<Var> {
    let maps = tape.conv1d(x, p.initial_weight, Padding::Same)?;
    let maps = tape.add_row(maps, p.initial_bias)?;
    Ok(if config.relu_between { tape.relu(maps) } else { maps })
}

fn hidden_of(tape: &Tape, x: Var) -> Result<usize> {
    match *tape.shape(x) {
        [_, h] => Ok(h),
        ref s => Err(Error::invalid("cacnn", format!("expected [L×H] input, got {s:?}"))),
    }
}

/// Figure-1 head: `x` `[L×H]` → feature maps `[L×K]`.
pub fn forward_context_vector(tape: &mut Tape, config: &CacnnConfig, p: &CacnnParams, x: Var) -> Result<Var> {
    if config.variant != CacnnVariant::ContextVector {
        return Err(Error::invalid("cacnn", "config is not the context-vector variant"));
    }
    let (Some(cw), Some(cb)) = (p.context_weight, p.context_bias) else {
        return Err(Error::invalid("cacnn", "context-vector head needs context filters"));
    };
    let h = hidden_of(tape, x)?;
    let maps = initial_maps(tape, config, p, x)?;
    let context = match config.reduction {
        Reduction::Max => tape.max_reduce(maps)?,
        Reduction::Sum => tape.sum_reduce(maps)?,
    };
    let signal = tape.reshape(context, &[config.initial_filters, 1])?;
    let mixed = tape.conv1d(signal, cw, Padding::Valid)?;
    let mixed = tape.add_row(mixed, cb)?;
    let tiled = tape.tile(mixed, config.filter_values(h))?;
    let filters = tape.reshape(tiled, &[config.sample_filters, config.sample_width, h])?;
    tape.conv1d(x, filters, Padding::Same)
}

/// Figure-2 head: `x` `[L×H]` → feature maps `[L×K]`.
pub fn forward_simplified(tape: &mut Tape, config: &CacnnConfig, p: &CacnnParams, x: Var) -> Result<Var> {
    if config.variant != CacnnVariant::Simplified {
        return Err(Error::invalid("cacnn", "config is not the simplified variant"));
    }
    let h = hidden_of(tape, x)?;
    let len = tape.shape(x)[0];
    config.validate(h, Some(len))?;
    let maps = initial_maps(tape, config, p, x)?;
    let need = config.filter_values(h);
    let flat = tape.reshape(maps, &[len * config.initial_filters])?;
    let filters = if need == len * config.initial_filters {
        flat
    } else {
        tape.split(flat, 0, &[need, len * config.initial_filters - need])?[0]
    };
    let filters = tape.reshape(filters, &[config.sample_filters, config.sample_width, h])?;
    tape.conv1d(x, filters, Padding::Same)
}

pub fn forward(tape: &mut Tape, config: &CacnnConfig, p: &CacnnParams, x: Var) -> Result<Var> {
    match config.variant {
        CacnnVariant::ContextVector => forward_context_vector(tape, config, p, x),
        CacnnVariant::Simplified => forward_simplified(tape, config, p, x),
    }
}

/// Per-position affine `[L×K]·[K×2] + b`; returns `(start, end)` logits, each `[L]`.
pub fn head_logits(tape: &mut Tape, maps: Var, weight: Var, bias: Var) -> Result<(Var, Var)> {
    let logits = tape.affine(maps, weight, bias)?;
    let len = tape.shape(logits)[0];
    let cols = tape.split(logits, 1, &[1, 1])?;
    let start = tape.reshape(cols[0], &[len])?;
    let end = tape.reshape(cols[1], &[len])?;
    Ok((start, end))
}

/// Sum of the registry's `head.cacnn.*` and `head.span.*` entries.
pub fn registry_head_count(registry: &ParameterRegistry) -> u64 {
    registry
        .iter()
        .filter(|(n, _)| n.starts_with("head."))
        .map(|(_, p)| p.numel() as u64)
        .sum()
}
