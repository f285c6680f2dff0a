use crate::error::{ArpgError, Result};
use crate::numcore::Scalar;

/// Upper bound on positions a table may be regenerated for.
pub const MAX_ROPE_POSITIONS: usize = 1 << 16;

/// Precomputed rotary embedding angles `θ[p, j] = p · base^(−2j / head_dim)`.
///
/// Dimension pairs are interleaved: `(2j, 2j+1)` rotate together.
#[derive(Clone, Debug)]
pub struct RopeTable<T> {
    max_positions: usize,
    head_dim: usize,
    base: f64,
    cos: Vec<T>,
    sin: Vec<T>,
}

impl<T: Scalar> RopeTable<T> {
    pub fn new(max_positions: usize, head_dim: usize, base: f64) -> Result<Self> {
        if head_dim == 0 || head_dim % 2 != 0 {
            return Err(ArpgError::Config(format!(
                "rotary head_dim must be even and positive, got {head_dim}"
            )));
        }
        if max_positions > MAX_ROPE_POSITIONS {
            return Err(ArpgError::Config(format!(
                "{max_positions} rotary positions exceeds the limit of {MAX_ROPE_POSITIONS}"
            )));
        }
        let half = head_dim / 2;
        let mut cos = Vec::with_capacity(max_positions * half);
        let mut sin = Vec::with_capacity(max_positions * half);
        for p in 0..max_positions {
            for j in 0..half {
                let freq = base.powf(-(2.0 * j as f64) / head_dim as f64);
                let angle = p as f64 * freq;
                cos.push(T::from_f64_lossy(angle.cos()));
                sin.push(T::from_f64_lossy(angle.sin()));
            }
        }
        Ok(RopeTable {
            max_positions,
            head_dim,
            base,
            cos,
            sin,
        })
    }

    /// Recomputes the table for a larger position range (resolution
    /// expansion / outpainting). Angles are evaluated afresh, not copied.
    pub fn extended(&self, max_positions: usize) -> Result<Self> {
        Self::new(max_positions, self.head_dim, self.base)
    }

    pub fn max_positions(&self) -> usize {
        self.max_positions
    }

    pub fn head_dim(&self) -> usize {
        self.head_dim
    }

    pub fn base(&self) -> f64 {
        self.base
    }

    fn check(&self, positions: &[usize]) -> Result<()> {
        match positions.iter().find(|&&p| p >= self.max_positions) {
            Some(p) => Err(ArpgError::Range(format!(
                "rotary position {p} outside table of {} positions",
                self.max_positions
            ))),
            None => Ok(()),
        }
    }

    /// Rotates every head vector of row `r` of `x[rows × heads·head_dim]`
    /// by the angles of `positions[r]`. `inverse` applies the transpose
    /// rotation (used by the backward pass).
    pub fn apply(&self, x: &[T], positions: &[usize], heads: usize, inverse: bool) -> Result<Vec<T>> {
        let width = heads * self.head_dim;
        if x.len() != positions.len() * width {
            return Err(ArpgError::Dimension(format!(
                "rope input of {} elements does not match {} positions × {width}",
                x.len(),
                positions.len()
            )));
        }
        self.check(positions)?;
        let half = self.head_dim / 2;
        let mut out = vec![T::zero(); x.len()];
        for (r, &p) in positions.iter().enumerate() {
            let cos = &self.cos[p * half..(p + 1) * half];
            let sin = &self.sin[p * half..(p + 1) * half];
            for h in 0..heads {
                let base = r * width + h * self.head_dim;
                for j in 0..half {
                    let x0 = x[base + 2 * j];
                    let x1 = x[base + 2 * j + 1];
                    let (c, s) = (cos[j], if inverse { -sin[j] } else { sin[j] });
                    out[base + 2 * j] = x0 * c - x1 * s;
                    out[base + 2 * j + 1] = x0 * s + x1 * c;
                }
            }
        }
        Ok(out)
    }
}

/// Applies rotary embedding to `x[T × heads·head_dim]` at `positions`.
pub fn apply_rope<T: Scalar>(
    x: &[T],
    positions: &[usize],
    heads: usize,
    table: &RopeTable<T>,
) -> Result<Vec<T>> {
    table.apply(x, positions, heads, false)
}
