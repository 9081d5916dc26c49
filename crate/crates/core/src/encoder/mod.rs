//! BERT-style encoder: configuration, parameter registry, freeze policy and forward pass.

mod config;
mod model;
mod registry;

pub use config::{
    Activation, AdapterConfig, EncoderConfig, FreezePolicy, INIT_STD, LAYER_NORM_EPS, SEGMENT_TYPES,
};
pub use model::{
    apply_freeze_policy, build_encoder, encoder_layout, forward, BoundParams, EncoderInput, EncoderOutput,
};
pub(crate) use model::ParamBuilder;
pub use registry::{ParamGroup, Parameter, ParameterRegistry, TrainableSummary};
