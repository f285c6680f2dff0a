//! Parallel decoding engine: KV cache, step loop with classifier-free
//! guidance, token sampling, and zero-shot inpainting/expansion.

mod cache;
mod edit;
mod generate;
mod sampling;

pub use cache::KvCache;
pub use edit::{expand, expansion_positions, inpaint, ExpandMode};
pub use generate::{
    generate, generate_batch, make_order, DecodeConfig, GenerationOutput, GenerationState,
};
pub use sampling::{cfg_combine, filtered_probs, sample_token, sample_tokens};
