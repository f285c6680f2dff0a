//! The two-pass decoder: Pass-1 causal self-attention over known tokens
//! producing a shared key/value representation, Pass-2 cross-attention from
//! target-aware [MASK] queries to predict tokens at arbitrary positions.

mod checkpoint;
mod config;
mod forward;
mod infer;
mod params;

pub use checkpoint::{Checkpoint, Manifest, TensorEntry, FORMAT_VERSION, MAGIC};
pub use config::{param_count, ModelConfig};
pub use forward::{
    forward_pass1, forward_pass2, forward_train, Pass1Output, Pass2Output, TrainOutput,
};
pub use infer::AttentionPattern;
pub use params::{decays, parameter_specs, ArpgModel, ParamLayout, Pass1Layer, Pass2Layer};
