//! Softmax attention, rotary position embedding and attention masks.

mod kernel;
mod mask;
mod rope;

pub use kernel::{
    attention_backward, attention_forward, attention_infer, AttentionGrads, AttentionSaved,
    HeadLayout,
};
pub use mask::{build_block_causal_mask, AttentionMask, MaskKind};
pub use rope::{apply_rope, RopeTable, MAX_ROPE_POSITIONS};
