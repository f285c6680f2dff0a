//! Gradient-free batched forward used by the decoding engine.
//!
//! Uses the same kernels, in the same per-row order, as the tape forward,
//! so cached decoding reproduces teacher-forcing values bit for bit.

use serde::{Deserialize, Serialize};

use super::ArpgModel;
use crate::attention::{attention_infer, AttentionMask};
use crate::decoding::KvCache;
use crate::error::{ArpgError, Result};
use crate::numcore::{kernels, Scalar};

/// How tokens appended in one decode step attend to each other in Pass-1.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionPattern {
    /// Strictly causal in generation order.
    Causal,
    /// Bidirectional within the step, causal across steps.
    BlockCausal,
}

impl std::str::FromStr for AttentionPattern {
    type Err = ArpgError;

    fn from_str(s: &str) -> Result<Self> {
        match s.replace('-', "_").as_str() {
            "causal" => Ok(AttentionPattern::Causal),
            "block_causal" | "block" => Ok(AttentionPattern::BlockCausal),
            _ => Err(ArpgError::Config(format!("unknown attention pattern '{s}'"))),
        }
    }
}

impl std::fmt::Display for AttentionPattern {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            AttentionPattern::Causal => "causal",
            AttentionPattern::BlockCausal => "block_causal",
        })
    }
}

fn tile(positions: &[usize], batch: usize) -> Vec<usize> {
    let mut out = Vec::with_capacity(positions.len() * batch);
    for _ in 0..batch {
        out.extend_from_slice(positions);
    }
    out
}

impl<T: Scalar> ArpgModel<T> {
    /// Empty cache for `batch` sequences of up to `capacity` rows each.
    pub fn new_cache(&self, batch: usize, capacity: usize) -> KvCache<T> {
        KvCache::new(self.config().cache_slots(), batch, self.config().hidden, capacity)
    }

    fn linear(&self, x: &[T], w: usize) -> Vec<T> {
        let shape = self.params()[w].value.shape();
        let (k, n) = (shape[0], shape[1]);
        let m = x.len() / k;
        let mut out = vec![T::zero(); m * n];
        kernels::matmul(x, self.weight(w), m, k, n, &mut out);
        out
    }

    fn norm(&self, x: &[T], gain: usize) -> Vec<T> {
        let eps = T::from_f64_lossy(self.config().norm_eps);
        kernels::rms_norm(x, self.weight(gain), self.config().hidden, eps).0
    }

    fn ffn(&self, x: &mut [T], norm: usize, gate: usize, up: usize, down: usize) {
        let xn = self.norm(x, norm);
        let g = self.linear(&xn, gate);
        let u = self.linear(&xn, up);
        let y = self.linear(&kernels::swiglu(&g, &u), down);
        kernels::add_assign(x, &y);
    }

    fn embed(&self, ids: &[usize]) -> Result<Vec<T>> {
        let d = self.config().hidden;
        let table = self.weight(self.layout().embedding);
        let rows = self.config().embedding_rows();
        let mut x = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= rows {
                return Err(ArpgError::Index(format!("embedding id {id} of {rows}")));
            }
            x.extend_from_slice(&table[id * d..(id + 1) * d]);
        }
        Ok(x)
    }

    /// Runs `ids` (`[batch × n]`, batch-major) through Pass-1 on top of the
    /// cached history, appending every slot's keys/values. All sequences
    /// share `positions` (length `n`).
    pub fn pass1_extend(
        &self,
        cache: &mut KvCache<T>,
        ids: &[usize],
        positions: &[usize],
        pattern: AttentionPattern,
    ) -> Result<()> {
        let n = positions.len();
        let batch = cache.batch();
        if n == 0 || ids.len() != batch * n {
            return Err(ArpgError::Contract(format!(
                "pass1 extension of {} ids for {batch} sequences × {n} positions",
                ids.len()
            )));
        }
        cache.check_room(n)?;
        let cfg = self.config();
        let (d, heads) = (cfg.hidden, cfg.heads);
        let layout = self.head_layout();
        let prefix = cache.len();
        let pos = tile(positions, batch);
        let mask = match pattern {
            AttentionPattern::Causal => AttentionMask::causal_with_prefix(n, prefix),
            AttentionPattern::BlockCausal => AttentionMask::block_with_prefix(n, prefix),
        };
        let mut x = self.embed(ids)?;
        for (slot, layer) in self.layout().pass1.iter().enumerate() {
            let xn = self.norm(&x, layer.attn_norm);
            let q = self.rope().apply(&self.linear(&xn, layer.wq), &pos, heads, false)?;
            let k = self.rope().apply(&self.linear(&xn, layer.wk), &pos, heads, false)?;
            let v = self.linear(&xn, layer.wv);
            cache.stage(slot, &k, &v, n)?;
            let mut attn = Vec::with_capacity(batch * n * d);
            for b in 0..batch {
                attn.extend(attention_infer(
                    &q[b * n * d..(b + 1) * n * d],
                    cache.keys(slot, b, prefix + n),
                    cache.values(slot, b, prefix + n),
                    &mask,
                    layout,
                )?);
            }
            kernels::add_assign(&mut x, &self.linear(&attn, layer.wo));
            self.ffn(&mut x, layer.ffn_norm, layer.w_gate, layer.w_up, layer.w_down);
        }
        let hn = self.norm(&x, self.layout().kv_norm);
        let first = self.layout().pass1.len();
        match self.layout().kv_proj {
            Some(w) => {
                let both = self.linear(&hn, w);
                let rows = batch * n;
                let mut k = Vec::with_capacity(rows * d);
                let mut v = Vec::with_capacity(rows * d);
                for r in 0..rows {
                    k.extend_from_slice(&both[r * 2 * d..r * 2 * d + d]);
                    v.extend_from_slice(&both[r * 2 * d + d..(r + 1) * 2 * d]);
                }
                let k = self.rope().apply(&k, &pos, heads, false)?;
                cache.stage(first, &k, &v, n)?;
            }
            None => {
                for (j, layer) in self.layout().pass2.iter().enumerate() {
                    let (wk, wv) = layer.kv.expect("unshared layers own key/value weights");
                    let k = self.rope().apply(&self.linear(&hn, wk), &pos, heads, false)?;
                    let v = self.linear(&hn, wv);
                    cache.stage(first + j, &k, &v, n)?;
                }
            }
        }
        cache.commit(n)
    }

    /// Pass-2 logits `[batch·Q × V]` for target-aware queries at `targets`
    /// against the full committed cache of every sequence.
    pub fn pass2_logits(&self, cache: &KvCache<T>, targets: &[usize]) -> Result<Vec<T>> {
        let keys = cache.len();
        if keys == 0 {
            return Err(ArpgError::Contract("pass2 needs a non-empty cache".into()));
        }
        if targets.contains(&0) {
            return Err(ArpgError::Contract("target position 0 is the condition slot".into()));
        }
        let cfg = self.config();
        let (d, heads) = (cfg.hidden, cfg.heads);
        let batch = cache.batch();
        let q_len = targets.len();
        let pos = tile(targets, batch);
        let mask = AttentionMask::full(q_len, keys);
        let first = self.layout().pass1.len();
        let shared = self.layout().kv_proj.is_some();
        let mut o = self.embed(&vec![cfg.mask_token(); batch * q_len])?;
        for (j, layer) in self.layout().pass2.iter().enumerate() {
            let slot = first + if shared { 0 } else { j };
            let on = self.norm(&o, layer.attn_norm);
            let q = self.rope().apply(&self.linear(&on, layer.wq), &pos, heads, false)?;
            let mut attn = Vec::with_capacity(batch * q_len * d);
            for b in 0..batch {
                attn.extend(attention_infer(
                    &q[b * q_len * d..(b + 1) * q_len * d],
                    cache.keys(slot, b, keys),
                    cache.values(slot, b, keys),
                    &mask,
                    self.head_layout(),
                )?);
            }
            kernels::add_assign(&mut o, &self.linear(&attn, layer.wo));
            self.ffn(&mut o, layer.ffn_norm, layer.w_gate, layer.w_up, layer.w_down);
        }
        let on = self.norm(&o, self.layout().final_norm);
        Ok(self.linear(&on, self.layout().head))
    }
}
