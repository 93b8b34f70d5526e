//! Learnable parameters and network building blocks.

pub mod blocks;
mod params;

pub use blocks::{
    count_parameters, norm_act, BlockSettings, ConvLayer, ConvTransposeLayer, DecoderStage,
    EncoderStage, LayerSpec, P3dBlock,
};
pub use params::{he_normal, Bound, ParamId, ParamStore};
