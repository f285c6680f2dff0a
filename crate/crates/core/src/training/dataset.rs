//! Procedural class-conditional token grids and a rule-based verifier.
//!
//! Class `c` draws a shape of kind `c mod 4` (filled rectangle, hollow
//! rectangle, diagonal stripes, checkerboard) from an enumerated template
//! family, paints all foreground cells with one token drawn from its palette
//! `{1+2c, 2+2c}` and leaves background cells at token 0.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ArpgError, Result};
use crate::model::ModelConfig;

pub const BACKGROUND: usize = 0;

/// An `H×W` grid of token ids with its class label.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenGrid {
    pub height: usize,
    pub width: usize,
    /// Raster order, `height·width` entries.
    pub tokens: Vec<usize>,
    pub class_id: usize,
}

impl TokenGrid {
    pub fn new(height: usize, width: usize, tokens: Vec<usize>, class_id: usize) -> Result<Self> {
        if tokens.len() != height * width {
            return Err(ArpgError::Dimension(format!(
                "{} tokens for a {height}×{width} grid",
                tokens.len()
            )));
        }
        Ok(TokenGrid {
            height,
            width,
            tokens,
            class_id,
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn get(&self, r: usize, c: usize) -> usize {
        self.tokens[r * self.width + c]
    }

    /// Whitespace-separated rows of token ids.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for r in 0..self.height {
            let row: Vec<String> = (0..self.width).map(|c| self.get(r, c).to_string()).collect();
            s.push_str(&row.join(" "));
            s.push('\n');
        }
        s
    }

    pub fn from_text(text: &str, class_id: usize) -> Result<Self> {
        let mut rows: Vec<Vec<usize>> = Vec::new();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let row = line
                .split_whitespace()
                .map(|t| t.parse::<usize>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| ArpgError::Config(format!("token grid: {e}")))?;
            rows.push(row);
        }
        let height = rows.len();
        let width = rows.first().map_or(0, Vec::len);
        if height == 0 || rows.iter().any(|r| r.len() != width) {
            return Err(ArpgError::Config("token grid rows are empty or ragged".into()));
        }
        TokenGrid::new(height, width, rows.concat(), class_id)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeKind {
    FilledRect,
    HollowRect,
    Stripes,
    Checker,
}

impl ShapeKind {
    pub fn of_class(class_id: usize) -> Self {
        [ShapeKind::FilledRect, ShapeKind::HollowRect, ShapeKind::Stripes, ShapeKind::Checker]
            [class_id % 4]
    }
}

/// Dataset parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToyDatasetSpec {
    pub height: usize,
    pub width: usize,
    pub vocab_size: usize,
    pub num_classes: usize,
    /// Probability that a cell is replaced by a uniformly random token.
    pub noise: f64,
}

impl ToyDatasetSpec {
    pub fn for_model(config: &ModelConfig, noise: f64) -> Self {
        ToyDatasetSpec {
            height: config.grid_height,
            width: config.grid_width,
            vocab_size: config.vocab_size,
            num_classes: config.num_classes,
            noise,
        }
    }

    pub fn seq_len(&self) -> usize {
        self.height * self.width
    }

    pub fn palette(&self, class_id: usize) -> [usize; 2] {
        [1 + 2 * class_id, 2 + 2 * class_id]
    }

    /// Errors unless the dataset fits the model's grid, vocabulary and classes.
    pub fn check_model(&self, config: &ModelConfig) -> Result<()> {
        if self.seq_len() != config.seq_len()
            || self.vocab_size != config.vocab_size
            || self.num_classes != config.num_classes
        {
            return Err(ArpgError::Config(format!(
                "dataset {}×{} (V={}, C={}) does not match model {}×{} (V={}, C={})",
                self.height,
                self.width,
                self.vocab_size,
                self.num_classes,
                config.grid_height,
                config.grid_width,
                config.vocab_size,
                config.num_classes
            )));
        }
        Ok(())
    }

    fn validate(&self) -> Result<()> {
        if self.height < 4 || self.width < 4 {
            return Err(ArpgError::Config("toy grids need at least 4×4 cells".into()));
        }
        if self.num_classes == 0 || self.vocab_size < 1 + 2 * self.num_classes {
            return Err(ArpgError::Config(format!(
                "{} classes need a vocabulary of at least {}",
                self.num_classes,
                1 + 2 * self.num_classes
            )));
        }
        if !(0.0..=1.0).contains(&self.noise) {
            return Err(ArpgError::Config(format!("noise {} outside [0,1]", self.noise)));
        }
        Ok(())
    }
}

/// Every foreground template of `kind` on an `h×w` grid.
pub fn templates(kind: ShapeKind, h: usize, w: usize) -> Vec<Vec<bool>> {
    let mut out = Vec::new();
    let grid = |f: &dyn Fn(usize, usize) -> bool| -> Vec<bool> {
        (0..h * w).map(|i| f(i / w, i % w)).collect()
    };
    match kind {
        ShapeKind::FilledRect | ShapeKind::HollowRect => {
            let hollow = kind == ShapeKind::HollowRect;
            let (lo, hi_h, hi_w) = if hollow { (3, h, w) } else { (2, h - 1, w - 1) };
            for rh in lo..=hi_h {
                for rw in lo..=hi_w {
                    for r0 in 0..=h - rh {
                        for c0 in 0..=w - rw {
                            out.push(grid(&|r, c| {
                                let inside = r >= r0 && r < r0 + rh && c >= c0 && c < c0 + rw;
                                let edge = r == r0 || r == r0 + rh - 1 || c == c0 || c == c0 + rw - 1;
                                inside && (!hollow || edge)
                            }));
                        }
                    }
                }
            }
        }
        ShapeKind::Stripes => {
            for period in [3, 4] {
                for phase in 0..period {
                    out.push(grid(&|r, c| (r + c + phase) % period == 0));
                    out.push(grid(&|r, c| (r + w - c + phase) % period == 0));
                }
            }
        }
        ShapeKind::Checker => {
            for block in [1, 2] {
                for phase in 0..2 {
                    out.push(grid(&|r, c| (r / block + c / block + phase) % 2 == 0));
                }
            }
        }
    }
    out
}

/// Sampler and verifier over a fixed [`ToyDatasetSpec`].
#[derive(Clone, Debug)]
pub struct ToyDataset {
    spec: ToyDatasetSpec,
    families: Vec<Vec<Vec<bool>>>,
}

impl ToyDataset {
    pub fn new(spec: ToyDatasetSpec) -> Result<Self> {
        spec.validate()?;
        let families = [ShapeKind::FilledRect, ShapeKind::HollowRect, ShapeKind::Stripes, ShapeKind::Checker]
            .iter()
            .map(|&k| templates(k, spec.height, spec.width))
            .collect();
        Ok(ToyDataset { spec, families })
    }

    pub fn spec(&self) -> &ToyDatasetSpec {
        &self.spec
    }

    fn family(&self, class_id: usize) -> &[Vec<bool>] {
        &self.families[class_id % 4]
    }

    /// One sample of `class_id` drawn with `rng`.
    pub fn sample<R: Rng + ?Sized>(&self, class_id: usize, rng: &mut R) -> TokenGrid {
        let family = self.family(class_id);
        let template = &family[rng.gen_range(0..family.len())];
        let colour = self.spec.palette(class_id)[rng.gen_range(0..2)];
        let tokens = template
            .iter()
            .map(|&fg| {
                let clean = if fg { colour } else { BACKGROUND };
                if self.spec.noise > 0.0 && rng.gen::<f64>() < self.spec.noise {
                    rng.gen_range(0..self.spec.vocab_size)
                } else {
                    clean
                }
            })
            .collect();
        TokenGrid {
            height: self.spec.height,
            width: self.spec.width,
            tokens,
            class_id,
        }
    }

    /// `n` samples; sample `i` has class `i mod C` and its own random stream
    /// derived from `(seed, i)`.
    pub fn make(&self, n: usize, seed: u64) -> Result<Vec<TokenGrid>> {
        if n == 0 {
            return Err(ArpgError::Config("dataset size must be at least 1".into()));
        }
        Ok((0..n)
            .map(|i| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(i as u64);
                self.sample(i % self.spec.num_classes, &mut rng)
            })
            .collect())
    }

    /// Best intersection-over-union between the grid's foreground (cells
    /// that are not background) and a template of `class_id`'s shape family.
    pub fn class_score(&self, tokens: &[usize], class_id: usize) -> f64 {
        let fg: Vec<bool> = tokens.iter().map(|&t| t != BACKGROUND).collect();
        self.family(class_id)
            .iter()
            .map(|t| {
                let inter = t.iter().zip(&fg).filter(|(a, b)| **a && **b).count();
                let union = t.iter().zip(&fg).filter(|(a, b)| **a || **b).count();
                if union == 0 { 0.0 } else { inter as f64 / union as f64 }
            })
            .fold(0.0, f64::max)
    }

    fn palette_share(&self, tokens: &[usize], class_id: usize) -> usize {
        let palette = self.spec.palette(class_id);
        tokens.iter().filter(|t| palette.contains(t)).count()
    }

    /// Class whose shape family fits best; exact ties go to the class whose
    /// palette covers more cells, then to the lowest id. `None` when no
    /// template overlaps the foreground at all.
    pub fn classify(&self, grid: &TokenGrid) -> Option<usize> {
        let mut best = (0, 0.0, 0);
        for c in 0..self.spec.num_classes {
            let s = self.class_score(&grid.tokens, c);
            let p = self.palette_share(&grid.tokens, c);
            if s > best.1 || (s == best.1 && p > best.2) {
                best = (c, s, p);
            }
        }
        (best.1 > 0.0).then_some(best.0)
    }

    /// Whether the verifier assigns `grid` to `class_id`.
    pub fn is_valid(&self, grid: &TokenGrid, class_id: usize) -> bool {
        grid.len() == self.spec.seq_len() && self.classify(grid) == Some(class_id)
    }
}

/// Convenience wrapper: dataset of `n` samples under `spec`.
pub fn make_dataset(spec: &ToyDatasetSpec, n: usize, seed: u64) -> Result<Vec<TokenGrid>> {
    ToyDataset::new(spec.clone())?.make(n, seed)
}
