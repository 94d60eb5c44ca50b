//! Minimal dense-tensor / reverse-mode autodiff substrate with transformer
//! building blocks, an Adam optimizer, checkpointing, and finite-difference
//! gradient verification. Compute runs in f32; gradient checks re-run the
//! same generic graph in f64.

mod adam;
mod checkpoint;
mod error;
mod gradcheck;
mod scalar;
mod tensor;
mod transformer;

pub use adam::{Adam, AdamConfig};
pub use checkpoint::{
    load_checkpoint_config, load_checkpoint_into, save_checkpoint, CHECKPOINT_FORMAT_VERSION,
};
pub use error::NnError;
pub use gradcheck::{grad_check, grad_check_params};
pub use scalar::Real;
pub use tensor::{backward, no_grad, scaled_dot_attention, Axis, NoGradGuard, Tensor};
pub use transformer::{
    causal_mask, sinusoidal_positions, DecoderBlock, Embedding, EncoderBlock, FeedForward,
    LayerNorm, ModelConfig, MultiHeadAttention, ParamBuilder, ParamSet, TransformerDecoder,
    TransformerEncoder,
};
