//! Zero-shot editing: known tokens are prefilled into Pass-1 and only the
//! remaining positions are decoded.

use serde::{Deserialize, Serialize};

use super::{DecodeConfig, GenerationOutput, GenerationState};
use crate::attention::MAX_ROPE_POSITIONS;
use crate::error::{ArpgError, Result};
use crate::model::ArpgModel;
use crate::numcore::Scalar;
use crate::training::TokenGrid;

/// Fills the positions of `partial` where `known` is false. Known tokens are
/// prefilled in raster order and appear unchanged in the output.
pub fn inpaint<T: Scalar>(
    model: &ArpgModel<T>,
    partial: &TokenGrid,
    known: &[bool],
    config: &DecodeConfig,
) -> Result<GenerationOutput> {
    if known.len() != partial.len() {
        return Err(ArpgError::Dimension(format!(
            "known mask of {} cells for a grid of {}",
            known.len(),
            partial.len()
        )));
    }
    let prefill: Vec<(usize, Vec<usize>)> = known
        .iter()
        .enumerate()
        .filter(|(_, &k)| k)
        .map(|(i, _)| (i + 1, vec![partial.tokens[i]]))
        .collect();
    GenerationState::new(
        model,
        &[partial.class_id],
        partial.height,
        partial.width,
        &prefill,
        config,
    )?
    .finish()
}

/// Placement of the base grid inside the expanded grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExpandMode {
    /// Base copied as a block at `(row, col)`.
    Outpaint { row: usize, col: usize },
    /// Base cell `(r, c)` placed at `(⌊r·H'/H⌋, ⌊c·W'/W⌋)`.
    Resolution,
}

/// Raster positions (1-indexed) of the base cells in an `h2×w2` grid.
pub fn expansion_positions(
    base_h: usize,
    base_w: usize,
    h2: usize,
    w2: usize,
    mode: ExpandMode,
) -> Result<Vec<usize>> {
    if h2 < base_h || w2 < base_w {
        return Err(ArpgError::Config(format!(
            "target {h2}×{w2} is smaller than base {base_h}×{base_w}"
        )));
    }
    let mut out = Vec::with_capacity(base_h * base_w);
    for r in 0..base_h {
        for c in 0..base_w {
            let (nr, nc) = match mode {
                ExpandMode::Outpaint { row, col } => {
                    if row + base_h > h2 || col + base_w > w2 {
                        return Err(ArpgError::Config(format!(
                            "base {base_h}×{base_w} at ({row},{col}) does not fit in {h2}×{w2}"
                        )));
                    }
                    (row + r, col + c)
                }
                ExpandMode::Resolution => (r * h2 / base_h, c * w2 / base_w),
            };
            out.push(nr * w2 + nc + 1);
        }
    }
    Ok(out)
}

/// Decodes an `h2×w2` grid around (outpaint) or between (resolution) the
/// tokens of `base`. The rotary table is regenerated for `h2·w2 + 1`
/// positions when the training grid is smaller.
pub fn expand<T: Scalar>(
    model: &ArpgModel<T>,
    base: &TokenGrid,
    h2: usize,
    w2: usize,
    mode: ExpandMode,
    config: &DecodeConfig,
) -> Result<GenerationOutput> {
    let total = h2 * w2;
    if total + 1 > MAX_ROPE_POSITIONS {
        return Err(ArpgError::Config(format!(
            "{h2}×{w2} exceeds the rotary regeneration limit of {MAX_ROPE_POSITIONS} positions"
        )));
    }
    let positions = expansion_positions(base.height, base.width, h2, w2, mode)?;
    let mut known: Vec<(usize, Vec<usize>)> = positions
        .into_iter()
        .zip(&base.tokens)
        .map(|(p, &t)| (p, vec![t]))
        .collect();
    known.sort_by_key(|(p, _)| *p);
    let extended;
    let m = if total + 1 > model.rope().max_positions() {
        extended = model.with_rope_positions(total + 1)?;
        &extended
    } else {
        model
    };
    GenerationState::new(m, &[base.class_id], h2, w2, &known, config)?.finish()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn placements() {
        let p = expansion_positions(2, 2, 2, 4, ExpandMode::Outpaint { row: 0, col: 2 }).unwrap();
        assert_eq!(p, vec![3, 4, 7, 8]);
        let p = expansion_positions(2, 2, 4, 4, ExpandMode::Resolution).unwrap();
        assert_eq!(p, vec![1, 3, 9, 11]);
        assert!(expansion_positions(2, 2, 2, 3, ExpandMode::Outpaint { row: 0, col: 2 }).is_err());
        assert!(expansion_positions(3, 3, 2, 3, ExpandMode::Resolution).is_err());
    }
}
