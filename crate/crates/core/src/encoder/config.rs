use crate::error::{Error, Result};

/// Token-type (segment) vocabulary size: query side and context side.
pub const SEGMENT_TYPES: usize = 2;

/// Layer-norm epsilon used throughout the encoder.
pub const LAYER_NORM_EPS: f64 = 1e-12;

/// Standard deviation of the truncated-normal weight initializer.
pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Gelu,
    Relu,
}

/// Bottleneck adapter inserted in both sub-layers of every transformer layer.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdapterConfig {
    pub size: usize,
    pub activation: Activation,
    /// Std of the up-projection init; zero makes every adapter an exact identity.
    pub up_init_std: f64,
}

impl AdapterConfig {
    pub fn new(size: usize) -> Self {
        Self {
            size,
            activation: Activation::Gelu,
            up_init_std: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderConfig {
    pub vocab_size: usize,
    pub hidden_size: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub intermediate_size: usize,
    pub max_seq_len: usize,
    pub adapter: Option<AdapterConfig>,
    pub init_std: f64,
}

impl EncoderConfig {
    /// BERT-base dimensions.
    pub fn bert_base() -> Self {
        Self {
            vocab_size: 30522,
            hidden_size: 768,
            num_layers: 12,
            num_heads: 12,
            intermediate_size: 3072,
            max_seq_len: 512,
            adapter: None,
            init_std: INIT_STD,
        }
    }

    /// A model small enough to train on one core in minutes.
    pub fn desk(num_layers: usize) -> Self {
        Self {
            vocab_size: 64,
            hidden_size: 32,
            num_layers,
            num_heads: 4,
            intermediate_size: 128,
            max_seq_len: 64,
            adapter: None,
            init_std: INIT_STD,
        }
    }

    /// Looks up a named preset: `bert-base`, `desk` (2 layers) or `desk4`.
    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "bert-base" => Some(Self::bert_base()),
            "desk" | "desk2" => Some(Self::desk(2)),
            "desk4" => Some(Self::desk(4)),
            _ => None,
        }
    }

    pub fn with_adapter(mut self, adapter: Option<AdapterConfig>) -> Self {
        self.adapter = adapter;
        self
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_size / self.num_heads
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("vocab_size", self.vocab_size),
            ("hidden_size", self.hidden_size),
            ("num_layers", self.num_layers),
            ("num_heads", self.num_heads),
            ("intermediate_size", self.intermediate_size),
            ("max_seq_len", self.max_seq_len),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if !self.hidden_size.is_multiple_of(self.num_heads) {
            return Err(Error::Config(format!(
                "hidden_size {} is not divisible by num_heads {}",
                self.hidden_size, self.num_heads
            )));
        }
        if let Some(a) = &self.adapter {
            if a.size == 0 {
                return Err(Error::Config("adapter size must be at least 1".into()));
            }
        }
        if !(self.init_std > 0.0 && self.init_std.is_finite()) {
            return Err(Error::Config("init_std must be positive".into()));
        }
        Ok(())
    }
}

/// Which parameters receive optimizer updates.
///
/// Layer norms (every layer plus the embedding norm) and the output head are
/// trainable under every policy; nothing here can switch them off.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FreezePolicy {
    /// Number of top transformer layers whose attention and FFN weights train.
    pub top_layers_trainable: usize,
    pub embeddings_trainable: bool,
    pub adapters_trainable: bool,
}

impl FreezePolicy {
    /// Everything trainable.
    pub fn full(num_layers: usize) -> Self {
        Self {
            top_layers_trainable: num_layers,
            embeddings_trainable: true,
            adapters_trainable: true,
        }
    }

    /// Top `k` layers trainable, embeddings frozen, adapters (if any) trainable.
    pub fn top(k: usize) -> Self {
        Self {
            top_layers_trainable: k,
            embeddings_trainable: false,
            adapters_trainable: true,
        }
    }

    pub fn validate(&self, config: &EncoderConfig) -> Result<()> {
        if self.top_layers_trainable > config.num_layers {
            return Err(Error::Config(format!(
                "cannot train top {} layers of a {}-layer encoder",
                self.top_layers_trainable, config.num_layers
            )));
        }
        Ok(())
    }

    /// Whether transformer layer `layer` (0 = bottom) has trainable attention/FFN weights.
    pub fn layer_trainable(&self, layer: usize, num_layers: usize) -> bool {
        layer + self.top_layers_trainable >= num_layers
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_are_valid() {
        for name in ["bert-base", "desk", "desk4"] {
            EncoderConfig::preset(name).unwrap().validate().unwrap();
        }
        assert!(EncoderConfig::preset("bert-large").is_none());
        assert_eq!(EncoderConfig::bert_base().head_dim(), 64);
    }

    #[test]
    fn rejects_indivisible_heads_and_empty_adapter() {
        let mut c = EncoderConfig::desk(2);
        c.num_heads = 5;
        assert!(c.validate().is_err());
        let c = EncoderConfig::desk(2).with_adapter(Some(AdapterConfig::new(0)));
        assert!(c.validate().is_err());
    }

    #[test]
    fn freeze_policy_layer_selection() {
        let p = FreezePolicy::top(1);
        assert!(!p.layer_trainable(0, 2));
        assert!(p.layer_trainable(1, 2));
        assert!(FreezePolicy::top(3).validate(&EncoderConfig::desk(2)).is_err());
        let none = FreezePolicy::top(0);
        assert!((0..12).all(|l| !none.layer_trainable(l, 12)));
    }
}
