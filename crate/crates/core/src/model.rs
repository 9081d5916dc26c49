//! Encoder plus span head: the full `F(x, q, θ)` producing start/end logits.

use crate::autograd::{Tape, Var};
use crate::cacnn::{self, CacnnConfig, CacnnParams};
use crate::encoder::{
    self, apply_freeze_policy, BoundParams, EncoderConfig, EncoderInput, FreezePolicy, ParamBuilder, ParameterRegistry,
};
use crate::error::Result;

pub const SPAN_WEIGHT: &str = "head.span.weight";
pub const SPAN_BIAS: &str = "head.span.bias";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeadConfig {
    /// A single per-position affine layer `H→2`.
    AffineSpan,
    Cacnn(CacnnConfig),
}

impl HeadConfig {
    /// Width of the features entering the final affine layer.
    pub fn feature_dim(&self, hidden: usize) -> usize {
        match self {
            HeadConfig::AffineSpan => hidden,
            HeadConfig::Cacnn(c) => c.sample_filters,
        }
    }

    pub fn param_count(&self, hidden: usize) -> u64 {
        match self {
            HeadConfig::AffineSpan => 2 * hidden as u64 + 2,
            HeadConfig::Cacnn(c) => c.param_count(hidden),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub head: HeadConfig,
}

impl ModelConfig {
    pub fn new(encoder: EncoderConfig, head: HeadConfig) -> Self {
        Self { encoder, head }
    }

    /// Validates the encoder and head; `seq_len` is needed for the simplified CACNN.
    pub fn validate(&self, seq_len: Option<usize>) -> Result<()> {
        self.encoder.validate()?;
        if let HeadConfig::Cacnn(c) = &self.head {
            c.validate(self.encoder.hidden_size, seq_len)?;
        }
        Ok(())
    }
}

fn add_head_params(b: &mut ParamBuilder<'_>, config: &ModelConfig) -> Result<()> {
    let h = config.encoder.hidden_size;
    if let HeadConfig::Cacnn(c) = &config.head {
        for (name, shape) in c.param_shapes(h) {
            if name.ends_with(".bias") {
                b.zeros(name.into(), shape)?;
            } else {
                b.weight(name.into(), shape)?;
            }
        }
    }
    b.linear("head.span", config.head.feature_dim(h), 2)
}

/// Encoder and head parameters, all trainable.
pub fn build_model(config: &ModelConfig, seed: u64) -> Result<ParameterRegistry> {
    config.validate(None)?;
    let mut registry = encoder::build_encoder(&config.encoder, seed)?;
    add_head_params(
        &mut ParamBuilder {
            registry: &mut registry,
            seed,
            std: config.encoder.init_std,
        },
        config,
    )?;
    Ok(registry)
}

/// Shape-only counterpart of [`build_model`], cheap at any scale.
pub fn model_layout(config: &ModelConfig) -> Result<ParameterRegistry> {
    config.validate(None)?;
    let mut registry = encoder::encoder_layout(&config.encoder)?;
    add_head_params(
        &mut ParamBuilder {
            registry: &mut registry,
            seed: 0,
            std: config.encoder.init_std,
        },
        config,
    )?;
    Ok(registry)
}

/// Builds a model and applies a freeze policy in one go.
pub fn build_frozen(config: &ModelConfig, policy: &FreezePolicy, seed: u64) -> Result<ParameterRegistry> {
    let mut registry = build_model(config, seed)?;
    apply_freeze_policy(&mut registry, &config.encoder, policy)?;
    Ok(registry)
}

/// Start and end logits, each `[L]`.
pub fn span_logits(
    tape: &mut Tape,
    params: &BoundParams,
    config: &ModelConfig,
    input: EncoderInput<'_>,
) -> Result<(Var, Var)> {
    let hidden = encoder::forward(tape, params, &config.encoder, input)?.hidden;
    let features = match &config.head {
        HeadConfig::AffineSpan => hidden,
        HeadConfig::Cacnn(c) => {
            let p = CacnnParams::from_bound(params, c)?;
            cacnn::forward(tape, c, &p, hidden)?
        }
    };
    cacnn::head_logits(tape, features, params.get(SPAN_WEIGHT)?, params.get(SPAN_BIAS)?)
}
