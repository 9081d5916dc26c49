use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::config::{Activation, EncoderConfig, FreezePolicy, LAYER_NORM_EPS, SEGMENT_TYPES};
use super::registry::{ParamGroup, ParameterRegistry};
use crate::autograd::{Tape, ValueGrid, Var};
use crate::error::{Error, Result};

const MASKED_SCORE: f64 = -1e9;

#[derive(Debug, Clone, Copy)]
enum Init {
    Normal,
    Zeros,
    Ones,
    Scaled(f64),
}

/// Deterministic per-parameter stream: the values of a parameter depend only
/// on the seed and its name, not on which other parameters exist.
pub(crate) fn param_rng(seed: u64, name: &str) -> ChaCha8Rng {
    // FNV-1a
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    ChaCha8Rng::seed_from_u64(seed ^ h.rotate_left(17))
}

/// Normal draws rejected outside two standard deviations.
pub(crate) fn truncated_normal(rng: &mut ChaCha8Rng, std: f64, n: usize) -> Vec<f64> {
    let normal = Normal::new(0.0, std).expect("finite std");
    (0..n)
        .map(|_| loop {
            let v: f64 = normal.sample(rng);
            if v.abs() <= 2.0 * std {
                break v;
            }
        })
        .collect()
}

/// Adds parameters to a registry, materializing values when it is not shape-only.
pub(crate) struct ParamBuilder<'a> {
    pub registry: &'a mut ParameterRegistry,
    pub seed: u64,
    pub std: f64,
}

impl ParamBuilder<'_> {
    fn add(&mut self, name: String, shape: Vec<usize>, init: Init) -> Result<()> {
        let n: usize = shape.iter().product();
        let values = if !self.registry.is_materialized() {
            Vec::new()
        } else {
            match init {
                Init::Zeros => vec![0.0; n],
                Init::Ones => vec![1.0; n],
                Init::Normal => truncated_normal(&mut param_rng(self.seed, &name), self.std, n),
                Init::Scaled(0.0) => vec![0.0; n],
                Init::Scaled(std) => truncated_normal(&mut param_rng(self.seed, &name), std, n),
            }
        };
        self.registry.insert(name, shape, values)
    }

    pub fn weight(&mut self, name: String, shape: Vec<usize>) -> Result<()> {
        self.add(name, shape, Init::Normal)
    }

    pub fn weight_with_std(&mut self, name: String, shape: Vec<usize>, std: f64) -> Result<()> {
        self.add(name, shape, Init::Scaled(std))
    }

    pub fn zeros(&mut self, name: String, shape: Vec<usize>) -> Result<()> {
        self.add(name, shape, Init::Zeros)
    }

    /// `{prefix}.weight` [input×output] and `{prefix}.bias` [output].
    pub fn linear(&mut self, prefix: &str, input: usize, output: usize) -> Result<()> {
        self.weight(format!("{prefix}.weight"), vec![input, output])?;
        self.zeros(format!("{prefix}.bias"), vec![output])
    }

    pub fn layer_norm(&mut self, prefix: &str, h: usize) -> Result<()> {
        self.add(format!("{prefix}.gain"), vec![h], Init::Ones)?;
        self.zeros(format!("{prefix}.bias"), vec![h])
    }
}

fn add_encoder_params(b: &mut ParamBuilder<'_>, config: &EncoderConfig) -> Result<()> {
    config.validate()?;
    let h = config.hidden_size;
    b.weight("embeddings.word".into(), vec![config.vocab_size, h])?;
    b.weight("embeddings.position".into(), vec![config.max_seq_len, h])?;
    b.weight("embeddings.segment".into(), vec![SEGMENT_TYPES, h])?;
    b.layer_norm("embeddings.norm", h)?;
    for l in 0..config.num_layers {
        for proj in ["query", "key", "value", "output"] {
            b.linear(&format!("layer.{l}.attention.{proj}"), h, h)?;
        }
        add_adapter(b, config, &format!("layer.{l}.attention.adapter"))?;
        b.layer_norm(&format!("layer.{l}.attention.norm"), h)?;
        b.linear(&format!("layer.{l}.ffn.intermediate"), h, config.intermediate_size)?;
        b.linear(&format!("layer.{l}.ffn.output"), config.intermediate_size, h)?;
        add_adapter(b, config, &format!("layer.{l}.ffn.adapter"))?;
        b.layer_norm(&format!("layer.{l}.ffn.norm"), h)?;
    }
    Ok(())
}

fn add_adapter(b: &mut ParamBuilder<'_>, config: &EncoderConfig, prefix: &str) -> Result<()> {
    let Some(adapter) = &config.adapter else {
        return Ok(());
    };
    let (h, a) = (config.hidden_size, adapter.size);
    b.linear(&format!("{prefix}.down"), h, a)?;
    b.weight_with_std(format!("{prefix}.up.weight"), vec![a, h], adapter.up_init_std)?;
    b.zeros(format!("{prefix}.up.bias"), vec![h])
}

/// Allocates and initializes every encoder parameter.
///
/// Weights are truncated normal with the configured std, biases and
/// layer-norm offsets zero, layer-norm gains one, adapter up-projections
/// drawn with `up_init_std` (zero by default).
pub fn build_encoder(config: &EncoderConfig, seed: u64) -> Result<ParameterRegistry> {
    let mut registry = ParameterRegistry::new();
    add_encoder_params(
        &mut ParamBuilder {
            registry: &mut registry,
            seed,
            std: config.init_std,
        },
        config,
    )?;
    Ok(registry)
}

/// Same entries as [`build_encoder`] without allocating values.
pub fn encoder_layout(config: &EncoderConfig) -> Result<ParameterRegistry> {
    let mut registry = ParameterRegistry::shape_only();
    add_encoder_params(
        &mut ParamBuilder {
            registry: &mut registry,
            seed: 0,
            std: config.init_std,
        },
        config,
    )?;
    Ok(registry)
}

/// Sets trainable flags from `policy`. Layer norms and head parameters are
/// always left trainable.
pub fn apply_freeze_policy(
    registry: &mut ParameterRegistry,
    config: &EncoderConfig,
    policy: &FreezePolicy,
) -> Result<()> {
    policy.validate(config)?;
    let n = config.num_layers;
    for (_, p) in registry.iter_mut() {
        p.trainable = match p.group {
            ParamGroup::LayerNorm | ParamGroup::Head => true,
            ParamGroup::Embedding => policy.embeddings_trainable,
            ParamGroup::Adapter { .. } => policy.adapters_trainable,
            ParamGroup::Attention { layer } | ParamGroup::FeedForward { layer } => {
                policy.layer_trainable(layer, n)
            }
        };
    }
    Ok(())
}

/// Registry parameters recorded on a tape as leaves.
///
/// Trainable parameters become gradient-collecting variables; frozen ones
/// become constants, so no gradient is ever computed for them.
pub struct BoundParams {
    vars: indexmap::IndexMap<String, Var>,
}

impl BoundParams {
    pub fn bind(tape: &mut Tape, registry: &ParameterRegistry) -> Result<Self> {
        let mut vars = indexmap::IndexMap::with_capacity(registry.len());
        for (name, p) in registry.iter() {
            if p.values.is_empty() {
                return Err(Error::Unmaterialized(name.to_string()));
            }
            let grid = ValueGrid::new(p.shape.clone(), p.values.clone())?.with_requires_grad(p.trainable);
            vars.insert(name.to_string(), tape.leaf(grid));
        }
        Ok(Self { vars })
    }

    /// Wraps existing tape handles, e.g. inputs of a gradient check.
    pub fn from_vars(vars: impl IntoIterator<Item = (String, Var)>) -> Self {
        Self {
            vars: vars.into_iter().collect(),
        }
    }

    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::UnknownParameter(name.to_string()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), *v))
    }
}

/// One encoder input sequence.
#[derive(Debug, Clone, Copy)]
pub struct EncoderInput<'a> {
    pub tokens: &'a [usize],
    pub segments: &'a [usize],
    /// 1 = attend, 0 = masked; `None` attends everywhere.
    pub attention_mask: Option<&'a [u8]>,
}

pub struct EncoderOutput {
    pub hidden: Var,
    /// Attention probabilities `[L×L]`, indexed `[layer][head]`.
    pub attention: Vec<Vec<Var>>,
}

fn check_input(config: &EncoderConfig, input: &EncoderInput<'_>) -> Result<()> {
    let len = input.tokens.len();
    if len == 0 || len > config.max_seq_len {
        return Err(Error::invalid(
            "encoder",
            format!("sequence length {len} outside 1..={}", config.max_seq_len),
        ));
    }
    if input.segments.len() != len || input.attention_mask.is_some_and(|m| m.len() != len) {
        return Err(Error::invalid("encoder", "tokens, segments and mask lengths differ"));
    }
    if let Some(&t) = input.tokens.iter().find(|&&t| t >= config.vocab_size) {
        return Err(Error::IdOutOfRange {
            what: "token",
            id: t,
            limit: config.vocab_size,
        });
    }
    if let Some(&s) = input.segments.iter().find(|&&s| s >= SEGMENT_TYPES) {
        return Err(Error::IdOutOfRange {
            what: "segment",
            id: s,
            limit: SEGMENT_TYPES,
        });
    }
    Ok(())
}

/// Post-layer-norm transformer encoder, optionally with adapters, giving `[L×H]`.
pub fn forward(
    tape: &mut Tape,
    params: &BoundParams,
    config: &EncoderConfig,
    input: EncoderInput<'_>,
) -> Result<EncoderOutput> {
    check_input(config, &input)?;
    let len = input.tokens.len();
    let positions: Vec<usize> = (0..len).collect();
    let word = tape.embedding(params.get("embeddings.word")?, input.tokens)?;
    let pos = tape.embedding(params.get("embeddings.position")?, &positions)?;
    let seg = tape.embedding(params.get("embeddings.segment")?, input.segments)?;
    let sum = tape.add(word, pos)?;
    let sum = tape.add(sum, seg)?;
    let mut x = layer_norm(tape, params, "embeddings.norm", sum)?;

    let mask = input.attention_mask.map(|m| {
        let additive = m.iter().map(|&keep| if keep != 0 { 0.0 } else { MASKED_SCORE }).collect();
        tape.constant(ValueGrid::vector(additive))
    });

    let mut attention = Vec::with_capacity(config.num_layers);
    for l in 0..config.num_layers {
        let (attn, probs) = self_attention(tape, params, config, l, x, mask)?;
        let attn = adapter(tape, params, config, &format!("layer.{l}.attention.adapter"), attn)?;
        let res = tape.add(x, attn)?;
        x = layer_norm(tape, params, &format!("layer.{l}.attention.norm"), res)?;

        let inner = linear(tape, params, &format!("layer.{l}.ffn.intermediate"), x)?;
        let inner = tape.gelu(inner);
        let ffn = linear(tape, params, &format!("layer.{l}.ffn.output"), inner)?;
        let ffn = adapter(tape, params, config, &format!("layer.{l}.ffn.adapter"), ffn)?;
        let res = tape.add(x, ffn)?;
        x = layer_norm(tape, params, &format!("layer.{l}.ffn.norm"), res)?;
        attention.push(probs);
    }
    Ok(EncoderOutput { hidden: x, attention })
}

fn linear(tape: &mut Tape, params: &BoundParams, prefix: &str, x: Var) -> Result<Var> {
    let w = params.get(&format!("{prefix}.weight"))?;
    let b = params.get(&format!("{prefix}.bias"))?;
    tape.affine(x, w, b)
}

fn layer_norm(tape: &mut Tape, params: &BoundParams, prefix: &str, x: Var) -> Result<Var> {
    let g = params.get(&format!("{prefix}.gain"))?;
    let b = params.get(&format!("{prefix}.bias"))?;
    tape.layer_norm(x, g, b, LAYER_NORM_EPS)
}

/// `z + Up(act(Down(z)))`, or `z` unchanged when no adapter is configured.
fn adapter(tape: &mut Tape, params: &BoundParams, config: &EncoderConfig, prefix: &str, z: Var) -> Result<Var> {
    let Some(a) = &config.adapter else {
        return Ok(z);
    };
    let down = linear(tape, params, &format!("{prefix}.down"), z)?;
    let act = match a.activation {
        Activation::Gelu => tape.gelu(down),
        Activation::Relu => tape.relu(down),
    };
    let up = linear(tape, params, &format!("{prefix}.up"), act)?;
    tape.add(z, up)
}

fn self_attention(
    tape: &mut Tape,
    params: &BoundParams,
    config: &EncoderConfig,
    layer: usize,
    x: Var,
    mask: Option<Var>,
) -> Result<(Var, Vec<Var>)> {
    let prefix = format!("layer.{layer}.attention");
    let heads = config.num_heads;
    let dh = config.head_dim();
    let sizes = vec![dh; heads];
    let q = linear(tape, params, &format!("{prefix}.query"), x)?;
    let k = linear(tape, params, &format!("{prefix}.key"), x)?;
    let v = linear(tape, params, &format!("{prefix}.value"), x)?;
    let qs = tape.split(q, 1, &sizes)?;
    let ks = tape.split(k, 1, &sizes)?;
    let vs = tape.split(v, 1, &sizes)?;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut contexts = Vec::with_capacity(heads);
    let mut probs = Vec::with_capacity(heads);
    for h in 0..heads {
        let kt = tape.transpose(ks[h])?;
        let scores = tape.matmul(qs[h], kt)?;
        let mut scores = tape.scale(scores, scale);
        if let Some(m) = mask {
            scores = tape.add_row(scores, m)?;
        }
        let p = tape.softmax(scores, 1)?;
        contexts.push(tape.matmul(p, vs[h])?);
        probs.push(p);
    }
    let ctx = tape.concat(&contexts, 1)?;
    let out = linear(tape, params, &format!("{prefix}.output"), ctx)?;
    Ok((out, probs))
}
