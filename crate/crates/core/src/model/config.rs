use serde::{Deserialize, Serialize};

use crate::attention::MAX_ROPE_POSITIONS;
use crate::error::{ArpgError, Result};

/// Architecture hyperparameters of the two-pass decoder.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// Image-token vocabulary `V`.
    pub vocab_size: usize,
    /// Conditioning classes `C` (a null class is added on top).
    pub num_classes: usize,
    /// Model width `d`.
    pub hidden: usize,
    pub heads: usize,
    pub pass1_layers: usize,
    pub pass2_layers: usize,
    pub grid_height: usize,
    pub grid_width: usize,
    pub rope_base: f64,
    pub dropout: f64,
    /// One global key/value projection shared by every Pass-2 layer.
    pub shared_kv: bool,
    pub norm_eps: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            vocab_size: 16,
            num_classes: 4,
            hidden: 128,
            heads: 4,
            pass1_layers: 4,
            pass2_layers: 4,
            grid_height: 8,
            grid_width: 8,
            rope_base: 10.0,
            dropout: 0.0,
            shared_kv: true,
            norm_eps: 1e-6,
        }
    }
}

impl ModelConfig {
    /// L configuration (12+12 layers, width 1024, 16 heads,
    /// 16384-entry codebook, 1000 classes, 16×16 tokens).
    pub fn large() -> Self {
        ModelConfig {
            vocab_size: 16_384,
            num_classes: 1000,
            hidden: 1024,
            heads: 16,
            pass1_layers: 12,
            pass2_layers: 12,
            grid_height: 16,
            grid_width: 16,
            ..Self::default()
        }
    }

    /// Tokens per image `T`.
    pub fn seq_len(&self) -> usize {
        self.grid_height * self.grid_width
    }

    pub fn head_dim(&self) -> usize {
        self.hidden / self.heads.max(1)
    }

    /// SwiGLU inner width: `8d/3` rounded up to a multiple of 8.
    pub fn ffn_hidden(&self) -> usize {
        let h = (8 * self.hidden).div_ceil(3);
        h.div_ceil(8) * 8
    }

    pub fn class_token(&self, class_id: usize) -> usize {
        self.vocab_size + class_id
    }

    pub fn null_token(&self) -> usize {
        self.vocab_size + self.num_classes
    }

    pub fn mask_token(&self) -> usize {
        self.vocab_size + self.num_classes + 1
    }

    /// Rows of the embedding table: image tokens, classes, null class, [MASK].
    pub fn embedding_rows(&self) -> usize {
        self.vocab_size + self.num_classes + 2
    }

    /// Number of key/value buffers a decode cache holds per sequence.
    pub fn cache_slots(&self) -> usize {
        self.pass1_layers + if self.shared_kv { 1 } else { self.pass2_layers }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(ArpgError::Config(m));
        if self.vocab_size == 0 || self.num_classes == 0 {
            return fail("vocab_size and num_classes must be positive".into());
        }
        if self.hidden == 0 || self.heads == 0 || self.hidden % self.heads != 0 {
            return fail(format!("hidden {} not divisible by heads {}", self.hidden, self.heads));
        }
        if self.head_dim() % 2 != 0 {
            return fail(format!("head_dim {} must be even for rotary embedding", self.head_dim()));
        }
        if self.pass1_layers + self.pass2_layers == 0 {
            return fail("model needs at least one layer".into());
        }
        if self.seq_len() == 0 {
            return fail("grid must be non-empty".into());
        }
        if self.seq_len() + 1 > MAX_ROPE_POSITIONS {
            return fail(format!("{} tokens exceed the rotary table limit", self.seq_len()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout {} outside [0,1)", self.dropout));
        }
        if !(self.rope_base > 1.0) || !(self.norm_eps >= 0.0) {
            return fail("rope_base must exceed 1 and norm_eps be non-negative".into());
        }
        Ok(())
    }
}

/// Exact trainable-scalar count of a configuration with or without the
/// shared key/value projection.
pub fn param_count(config: &ModelConfig, shared_kv: bool) -> usize {
    let d = config.hidden;
    let f = config.ffn_hidden();
    let ffn = 3 * d * f;
    let pass1 = config.pass1_layers * (4 * d * d + ffn + 2 * d);
    let pass2_own_kv = if shared_kv { 0 } else { 2 * d * d };
    let pass2 = config.pass2_layers * (2 * d * d + pass2_own_kv + ffn + 2 * d);
    let global_kv = if shared_kv { 2 * d * d } else { 0 };
    config.embedding_rows() * d + pass1 + d + global_kv + pass2 + d + d * config.vocab_size
}
