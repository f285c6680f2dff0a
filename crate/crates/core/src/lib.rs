//! Two-pass randomized parallel decoder for discrete image tokens.
//!
//! Pass-1 runs causal self-attention over known tokens in an arbitrary
//! generation order and projects them into one shared key/value set.
//! Pass-2 turns a single learned `[MASK]` embedding, rotated to a target
//! position, into a query that cross-attends to those keys and values. Since
//! queries never see each other, any number of positions can be predicted in
//! one step against the same KV cache.

pub mod attention;
pub mod cli;
pub mod decoding;
pub mod error;
pub mod model;
pub mod numcore;
pub mod ordering;
pub mod training;

pub use error::{ArpgError, Result};
