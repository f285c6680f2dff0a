use crate::error::{ArpgError, Result};

/// Which structure an [`AttentionMask`] encodes.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum MaskKind {
    /// `(i, j)` allowed iff `j ≤ i + offset`.
    Causal,
    /// Bidirectional inside a block, causal across blocks.
    BlockCausal,
    /// Query of decode step `t` sees keys before the first index of step `t`
    /// (key 0 is the condition token).
    Cross,
    /// Every key visible.
    Full,
}

/// Attention mask. Every supported pattern allows a prefix of the keys for
/// each query, so the mask is stored as one key limit per query row:
/// `(i, j)` is allowed iff `j < limit[i]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttentionMask {
    kind: MaskKind,
    key_len: usize,
    limits: Vec<usize>,
}

impl AttentionMask {
    pub fn causal(len: usize) -> Self {
        Self::causal_with_prefix(len, 0)
    }

    /// Causal mask for `len` new rows appended after `prefix` cached keys.
    pub fn causal_with_prefix(len: usize, prefix: usize) -> Self {
        AttentionMask {
            kind: MaskKind::Causal,
            key_len: prefix + len,
            limits: (0..len).map(|i| prefix + i + 1).collect(),
        }
    }

    /// `len` new rows forming one block after `prefix` cached keys: they see
    /// the whole prefix and each other.
    pub fn block_with_prefix(len: usize, prefix: usize) -> Self {
        AttentionMask {
            kind: MaskKind::BlockCausal,
            key_len: prefix + len,
            limits: vec![prefix + len; len],
        }
    }

    pub fn full(query_len: usize, key_len: usize) -> Self {
        AttentionMask {
            kind: MaskKind::Full,
            key_len,
            limits: vec![key_len; query_len],
        }
    }

    /// Training-time cross mask for queries grouped into decode steps.
    /// Query slots and key rows are offset by one (key 0 is the condition),
    /// so a query of a step starting at token index `a` sees keys `0..=a`.
    pub fn cross_steps(step_sizes: &[usize]) -> Result<Self> {
        validate_steps(step_sizes)?;
        let total: usize = step_sizes.iter().sum();
        let mut limits = Vec::with_capacity(total);
        let mut start = 0;
        for &c in step_sizes {
            limits.extend(std::iter::repeat(start + 1).take(c));
            start += c;
        }
        Ok(AttentionMask {
            kind: MaskKind::Cross,
            key_len: total,
            limits,
        })
    }

    pub fn kind(&self) -> &MaskKind {
        &self.kind
    }

    pub fn query_len(&self) -> usize {
        self.limits.len()
    }

    pub fn key_len(&self) -> usize {
        self.key_len
    }

    /// Number of visible keys (a prefix) for query `i`.
    #[inline]
    pub fn limit(&self, i: usize) -> usize {
        self.limits[i]
    }

    #[inline]
    pub fn allowed(&self, i: usize, j: usize) -> bool {
        j < self.limits[i]
    }

    /// Dense additive form: 0 where allowed, `masked` elsewhere.
    pub fn additive<T: Copy>(&self, zero: T, masked: T) -> Vec<T> {
        let mut out = Vec::with_capacity(self.query_len() * self.key_len);
        for i in 0..self.query_len() {
            for j in 0..self.key_len {
                out.push(if self.allowed(i, j) { zero } else { masked });
            }
        }
        out
    }
}

fn validate_steps(step_sizes: &[usize]) -> Result<()> {
    if step_sizes.is_empty() {
        return Err(ArpgError::Config("empty step size list".into()));
    }
    if let Some(pos) = step_sizes.iter().position(|&c| c == 0) {
        return Err(ArpgError::Config(format!("step {pos} has zero tokens")));
    }
    Ok(())
}

/// Block-wise causal self-attention mask: tokens of one block see each other
/// and every earlier block.
pub fn build_block_causal_mask(step_sizes: &[usize]) -> Result<AttentionMask> {
    validate_steps(step_sizes)?;
    let total: usize = step_sizes.iter().sum();
    let mut limits = Vec::with_capacity(total);
    let mut end = 0;
    for &c in step_sizes {
        end += c;
        limits.extend(std::iter::repeat(end).take(c));
    }
    Ok(AttentionMask {
        kind: MaskKind::BlockCausal,
        key_len: total,
        limits,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_block_is_bidirectional() {
        let m = build_block_causal_mask(&[5]).unwrap();
        assert_eq!(m, AttentionMask { kind: MaskKind::BlockCausal, ..AttentionMask::full(5, 5) });
    }

    #[test]
    fn unit_blocks_are_causal() {
        let m = build_block_causal_mask(&[1; 6]).unwrap();
        let c = AttentionMask::causal(6);
        for i in 0..6 {
            for j in 0..6 {
                assert_eq!(m.allowed(i, j), c.allowed(i, j));
            }
        }
    }

    #[test]
    fn two_three_split_by_definition() {
        let steps = [2, 3];
        let m = build_block_causal_mask(&steps).unwrap();
        let block = |i: usize| if i < 2 { 0 } else { 1 };
        for i in 0..5 {
            for j in 0..5 {
                assert_eq!(m.allowed(i, j), block(j) <= block(i), "({i},{j})");
            }
        }
        assert!(m.allowed(1, 0) && m.allowed(0, 1));
        // 2 and 4 share the second block
        assert!(m.allowed(2, 4));
        assert!(!m.allowed(1, 2));
        assert!(m.allowed(4, 1));
    }

    #[test]
    fn zero_step_is_config_error() {
        assert!(matches!(build_block_causal_mask(&[2, 0, 1]), Err(ArpgError::Config(_))));
        assert!(build_block_causal_mask(&[]).is_err());
    }

    #[test]
    fn cross_steps_with_unit_steps_is_causal() {
        let m = AttentionMask::cross_steps(&[1; 4]).unwrap();
        for i in 0..4 {
            assert_eq!(m.limit(i), i + 1);
        }
        let m = AttentionMask::cross_steps(&[2, 2]).unwrap();
        assert_eq!((0..4).map(|i| m.limit(i)).collect::<Vec<_>>(), vec![1, 1, 3, 3]);
    }
}
