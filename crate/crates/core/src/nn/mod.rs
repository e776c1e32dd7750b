//! Dense tensors, reverse-mode differentiation and transformer layers.

pub mod layers;
pub mod params;
pub mod tape;
pub mod tensor;

pub use layers::{
    adaptive_avg_pool, dropout, eq_encoder_block, ffn, glorot_uniform, layer_norm, multi_head_attention,
    positional_encoding, soil_encoder_block, AttentionParams, BlockLayout, EncoderBlockSpec, EqBlockParams,
    FfnParams, LayerNormParams, LinearParams, Mode, SoilBlockParams, LEAKY_SLOPE, LN_EPS,
};
pub use params::{Param, ParamId, ParamStore};
pub use tape::{bce_value, Gradients, Tape, Var, BCE_CLAMP};
pub use tensor::Tensor;
