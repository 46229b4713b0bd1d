//! Dense 2-D math with reverse-mode gradients, AdamW and finite-difference checks.

mod adamw;
mod gradcheck;
mod graph;
mod layers;
mod params;
mod tensor;

pub use adamw::{AdamWConfig, AdamWState};
pub use gradcheck::{finite_diff_check, GradCheckConfig, GradCheckReport};
pub use graph::{Graph, Var};
pub use layers::{
    attention_on, block_on, ffn, ffn_on, layer_norm_on, multi_head_attention, AttentionNodes,
    AttentionParams, AttentionTrace, BlockParams, FfnParams, LayerNormParams, LAYER_NORM_EPS,
};
pub use params::{Gradients, ParamId, ParamStore};
pub use tensor::{gelu, Tensor2};
