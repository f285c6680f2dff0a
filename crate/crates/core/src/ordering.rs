//! Generation orders, per-step token counts and guidance-scale schedules.

use std::f64::consts::{FRAC_PI_2, PI};
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ArpgError, Result};

/// A bijection over raster positions `1..=T` (position 0 is the condition
/// token). `order[i]` is the position generated `i`-th.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<usize>", into = "Vec<usize>")]
pub struct Permutation {
    order: Vec<usize>,
}

impl TryFrom<Vec<usize>> for Permutation {
    type Error = ArpgError;

    fn try_from(order: Vec<usize>) -> Result<Self> {
        Permutation::new(order)
    }
}

impl From<Permutation> for Vec<usize> {
    fn from(p: Permutation) -> Self {
        p.order
    }
}

impl Permutation {
    pub fn new(order: Vec<usize>) -> Result<Self> {
        let t = order.len();
        let mut seen = vec![false; t + 1];
        for &p in &order {
            if p == 0 || p > t || seen[p] {
                return Err(ArpgError::Contract(format!(
                    "order is not a bijection over 1..={t} (offending entry {p})"
                )));
            }
            seen[p] = true;
        }
        Ok(Permutation { order })
    }

    pub fn identity(len: usize) -> Self {
        Permutation {
            order: (1..=len).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    /// Positions in generation order (1-indexed).
    pub fn positions(&self) -> &[usize] {
        &self.order
    }

    /// Reorders raster-ordered items into generation order.
    pub fn shuffle<U: Copy>(&self, raster: &[U]) -> Vec<U> {
        self.order.iter().map(|&p| raster[p - 1]).collect()
    }

    /// Inverse of [`Permutation::shuffle`] (the argsort of the order).
    pub fn unshuffle<U: Copy + Default>(&self, shuffled: &[U]) -> Vec<U> {
        let mut out = vec![U::default(); self.order.len()];
        for (i, &p) in self.order.iter().enumerate() {
            out[p - 1] = shuffled[i];
        }
        out
    }
}

/// Uniformly random generation order over `len` positions.
pub fn sample_permutation<R: Rng + ?Sized>(len: usize, rng: &mut R) -> Permutation {
    let mut order: Vec<usize> = (1..=len).collect();
    order.shuffle(rng);
    Permutation { order }
}

/// Deterministic traversals of an `H×W` grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FixedOrder {
    Raster,
    SpiralIn,
    SpiralOut,
    ZCurve,
    /// Serpentine rows: even rows left to right, odd rows right to left.
    Alternate,
}

/// Order used for decoding.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OrderKind {
    Random,
    Raster,
    SpiralIn,
    SpiralOut,
    ZCurve,
    Alternate,
}

impl OrderKind {
    pub fn fixed(self) -> Option<FixedOrder> {
        match self {
            OrderKind::Random => None,
            OrderKind::Raster => Some(FixedOrder::Raster),
            OrderKind::SpiralIn => Some(FixedOrder::SpiralIn),
            OrderKind::SpiralOut => Some(FixedOrder::SpiralOut),
            OrderKind::ZCurve => Some(FixedOrder::ZCurve),
            OrderKind::Alternate => Some(FixedOrder::Alternate),
        }
    }
}

impl FromStr for OrderKind {
    type Err = ArpgError;

    fn from_str(s: &str) -> Result<Self> {
        serde_json::from_value(serde_json::Value::String(s.replace('-', "_")))
            .map_err(|_| ArpgError::Config(format!("unknown order kind '{s}'")))
    }
}

impl FromStr for FixedOrder {
    type Err = ArpgError;

    fn from_str(s: &str) -> Result<Self> {
        OrderKind::from_str(s)?
            .fixed()
            .ok_or_else(|| ArpgError::Config(format!("'{s}' is not a fixed order")))
    }
}

/// Positions of the named traversal over a `height×width` grid.
pub fn fixed_order(kind: FixedOrder, height: usize, width: usize) -> Result<Permutation> {
    if height == 0 || width == 0 {
        return Err(ArpgError::Config(format!("empty grid {height}×{width}")));
    }
    let cells: Vec<(usize, usize)> = match kind {
        FixedOrder::Raster => (0..height).flat_map(|r| (0..width).map(move |c| (r, c))).collect(),
        FixedOrder::SpiralIn => spiral_in(height, width),
        FixedOrder::SpiralOut => {
            let mut s = spiral_in(height, width);
            s.reverse();
            s
        }
        FixedOrder::ZCurve => {
            let mut cells: Vec<(usize, usize)> =
                (0..height).flat_map(|r| (0..width).map(move |c| (r, c))).collect();
            cells.sort_by_key(|&(r, c)| morton(r, c));
            cells
        }
        FixedOrder::Alternate => (0..height)
            .flat_map(|r| {
                let row: Vec<(usize, usize)> = if r % 2 == 0 {
                    (0..width).map(|c| (r, c)).collect()
                } else {
                    (0..width).rev().map(|c| (r, c)).collect()
                };
                row
            })
            .collect(),
    };
    Permutation::new(cells.into_iter().map(|(r, c)| r * width + c + 1).collect())
}

/// Clockwise ring-by-ring traversal from the top-left corner.
fn spiral_in(height: usize, width: usize) -> Vec<(usize, usize)> {
    let mut out = Vec::with_capacity(height * width);
    let (mut top, mut bottom, mut left, mut right) = (0isize, height as isize - 1, 0isize, width as isize - 1);
    while top <= bottom && left <= right {
        for c in left..=right {
            out.push((top as usize, c as usize));
        }
        for r in top + 1..=bottom {
            out.push((r as usize, right as usize));
        }
        if top < bottom {
            for c in (left..right).rev() {
                out.push((bottom as usize, c as usize));
            }
        }
        if left < right {
            for r in (top + 1..bottom).rev() {
                out.push((r as usize, left as usize));
            }
        }
        top += 1;
        bottom -= 1;
        left += 1;
        right -= 1;
    }
    out
}

fn morton(r: usize, c: usize) -> u64 {
    let mut code = 0u64;
    for bit in 0..32 {
        code |= (((c >> bit) & 1) as u64) << (2 * bit);
        code |= (((r >> bit) & 1) as u64) << (2 * bit + 1);
    }
    code
}

/// Shape of the cumulative-decoded-fraction curve.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    Arccos,
    Cosine,
    Uniform,
}

impl ScheduleKind {
    /// Cumulative fraction of tokens decoded after progress `u ∈ [0,1]`.
    pub fn fraction(self, u: f64) -> f64 {
        match self {
            ScheduleKind::Arccos => 1.0 - (2.0 / PI) * u.clamp(-1.0, 1.0).acos(),
            ScheduleKind::Cosine => 1.0 - (FRAC_PI_2 * u).cos(),
            ScheduleKind::Uniform => u,
        }
    }
}

impl FromStr for ScheduleKind {
    type Err = ArpgError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "arccos" => Ok(ScheduleKind::Arccos),
            "cosine" => Ok(ScheduleKind::Cosine),
            "uniform" => Ok(ScheduleKind::Uniform),
            _ => Err(ArpgError::Config(format!("unknown schedule '{s}'"))),
        }
    }
}

impl fmt::Display for ScheduleKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            ScheduleKind::Arccos => "arccos",
            ScheduleKind::Cosine => "cosine",
            ScheduleKind::Uniform => "uniform",
        };
        f.write_str(s)
    }
}

/// How many tokens each of `steps` decode steps produces out of `total`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecodeSchedule {
    pub kind: ScheduleKind,
    pub steps: usize,
    pub total: usize,
}

impl DecodeSchedule {
    pub fn new(kind: ScheduleKind, steps: usize, total: usize) -> Self {
        DecodeSchedule { kind, steps, total }
    }

    pub fn counts(&self) -> Result<Vec<usize>> {
        schedule_counts(self)
    }
}

/// Per-step counts `c_s = round(T·f(s/S)) − round(T·f((s−1)/S))`. Steps that
/// round to zero borrow one token from the currently largest step, so every
/// count is at least one and the total is exactly `T`.
pub fn schedule_counts(sched: &DecodeSchedule) -> Result<Vec<usize>> {
    let (s, t) = (sched.steps, sched.total);
    if s == 0 || s > t {
        return Err(ArpgError::Config(format!(
            "need 1 ≤ steps ≤ tokens, got {s} steps for {t} tokens"
        )));
    }
    let cumulative = |i: usize| -> usize {
        if i == s {
            return t;
        }
        let v = (t as f64 * sched.kind.fraction(i as f64 / s as f64)).round();
        (v.max(0.0) as usize).min(t)
    };
    let mut counts: Vec<usize> = (1..=s).map(|i| cumulative(i).saturating_sub(cumulative(i - 1))).collect();
    while let Some(zero) = counts.iter().position(|&c| c == 0) {
        let largest = (0..s).fold(0, |best, i| if counts[i] > counts[best] { i } else { best });
        counts[largest] -= 1;
        counts[zero] += 1;
    }
    debug_assert_eq!(counts.iter().sum::<usize>(), t);
    Ok(counts)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CfgKind {
    Linear,
    Constant,
}

impl FromStr for CfgKind {
    type Err = ArpgError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(CfgKind::Linear),
            "constant" => Ok(CfgKind::Constant),
            _ => Err(ArpgError::Config(format!("unknown cfg schedule '{s}'"))),
        }
    }
}

/// Guidance scale as a function of decoding progress.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CfgSchedule {
    pub kind: CfgKind,
    /// Terminal scale `w`.
    pub scale: f64,
}

impl CfgSchedule {
    pub fn scale_at(&self, decoded_fraction: f64) -> f64 {
        cfg_scale_at(self, decoded_fraction)
    }

    /// Whether any step uses a scale other than 1.
    pub fn is_active(&self) -> bool {
        self.scale != 1.0
    }
}

/// Linear: `1 + (w − 1)·u`; constant: `w`. `u` is the fraction of tokens
/// already decoded before the step.
pub fn cfg_scale_at(sched: &CfgSchedule, decoded_fraction: f64) -> f64 {
    let u = decoded_fraction.clamp(0.0, 1.0);
    match sched.kind {
        CfgKind::Linear => 1.0 + (sched.scale - 1.0) * u,
        CfgKind::Constant => sched.scale,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Reference spiral: walk right/down/left/up, turning clockwise whenever
    /// the next cell is off-grid or already visited.
    fn walker(h: usize, w: usize) -> Vec<usize> {
        let dirs = [(0i64, 1i64), (1, 0), (0, -1), (-1, 0)];
        let mut seen = vec![vec![false; w]; h];
        let (mut r, mut c, mut d) = (0i64, 0i64, 0usize);
        let mut out = Vec::new();
        for _ in 0..h * w {
            seen[r as usize][c as usize] = true;
            out.push(r as usize * w + c as usize + 1);
            for _ in 0..4 {
                let (nr, nc) = (r + dirs[d].0, c + dirs[d].1);
                if nr >= 0 && nc >= 0 && (nr as usize) < h && (nc as usize) < w && !seen[nr as usize][nc as usize] {
                    break;
                }
                d = (d + 1) % 4;
            }
            r += dirs[d].0;
            c += dirs[d].1;
        }
        out
    }

    #[test]
    fn raster_two_by_two() {
        assert_eq!(fixed_order(FixedOrder::Raster, 2, 2).unwrap().positions(), &[1, 2, 3, 4]);
    }

    #[test]
    fn spiral_matches_walker() {
        for (h, w) in [(3, 3), (1, 5), (5, 1), (2, 7), (4, 6), (8, 8)] {
            let p = fixed_order(FixedOrder::SpiralIn, h, w).unwrap();
            assert_eq!(p.positions(), &walker(h, w)[..], "{h}×{w}");
        }
        assert_eq!(
            fixed_order(FixedOrder::SpiralIn, 3, 3).unwrap().positions(),
            &[1, 2, 3, 6, 9, 8, 7, 4, 5]
        );
        let mut out = walker(3, 3);
        out.reverse();
        assert_eq!(fixed_order(FixedOrder::SpiralOut, 3, 3).unwrap().positions(), &out[..]);
    }

    #[test]
    fn z_curve_and_alternate() {
        assert_eq!(
            fixed_order(FixedOrder::ZCurve, 4, 4).unwrap().positions(),
            &[1, 2, 5, 6, 3, 4, 7, 8, 9, 10, 13, 14, 11, 12, 15, 16]
        );
        assert_eq!(
            fixed_order(FixedOrder::Alternate, 2, 3).unwrap().positions(),
            &[1, 2, 3, 6, 5, 4]
        );
    }

    #[test]
    fn unknown_order_kind_is_config_error() {
        assert!(matches!("hilbert".parse::<OrderKind>(), Err(ArpgError::Config(_))));
        assert_eq!("spiral-in".parse::<OrderKind>().unwrap(), OrderKind::SpiralIn);
        assert!("random".parse::<FixedOrder>().is_err());
    }

    #[test]
    fn fixed_orders_are_bijections_up_to_32() {
        for h in 1..=32 {
            for w in 1..=32 {
                for kind in [FixedOrder::Raster, FixedOrder::SpiralIn, FixedOrder::SpiralOut, FixedOrder::ZCurve, FixedOrder::Alternate] {
                    assert!(fixed_order(kind, h, w).is_ok());
                }
            }
        }
    }

    #[test]
    fn permutation_validation_and_shuffle_roundtrip() {
        assert!(Permutation::new(vec![1, 1]).is_err());
        assert!(Permutation::new(vec![0, 1]).is_err());
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = sample_permutation(10, &mut rng);
        let raster: Vec<u32> = (100..110).collect();
        assert_eq!(p.unshuffle(&p.shuffle(&raster)), raster);
        let mut sorted = p.positions().to_vec();
        sorted.sort();
        assert_eq!(sorted, (1..=10).collect::<Vec<_>>());
    }

    #[test]
    fn schedule_edge_cases() {
        for kind in [ScheduleKind::Arccos, ScheduleKind::Cosine, ScheduleKind::Uniform] {
            assert_eq!(DecodeSchedule::new(kind, 16, 16).counts().unwrap(), vec![1; 16]);
            assert_eq!(DecodeSchedule::new(kind, 1, 16).counts().unwrap(), vec![16]);
        }
        assert!(matches!(
            DecodeSchedule::new(ScheduleKind::Arccos, 17, 16).counts(),
            Err(ArpgError::Config(_))
        ));
    }

    #[test]
    fn arccos_sixteen_over_four_steps() {
        // closed form: f(u) = 1 − (2/π)·acos(u)
        let f = |u: f64| 1.0 - 2.0 / std::f64::consts::PI * u.acos();
        let cum: Vec<f64> = [0.25, 0.5, 0.75, 1.0].iter().map(|&u| (16.0 * f(u)).round()).collect();
        assert_eq!(cum, vec![3.0, 5.0, 9.0, 16.0]);
        assert_eq!(DecodeSchedule::new(ScheduleKind::Arccos, 4, 16).counts().unwrap(), vec![3, 2, 4, 7]);
    }

    #[test]
    fn cfg_scale_examples() {
        let lin = CfgSchedule { kind: CfgKind::Linear, scale: 5.4 };
        assert_eq!(lin.scale_at(0.0), 1.0);
        assert!((lin.scale_at(1.0) - 5.4).abs() < 1e-12);
        let lin3 = CfgSchedule { kind: CfgKind::Linear, scale: 3.0 };
        assert_eq!(lin3.scale_at(0.5), 2.0);
        let c = CfgSchedule { kind: CfgKind::Constant, scale: 4.0 };
        assert_eq!(c.scale_at(0.3), 4.0);
    }

    proptest! {
        #[test]
        fn counts_sum_to_total(t in 1usize..300, frac in 0.0f64..1.0, k in 0usize..3) {
            let kind = [ScheduleKind::Arccos, ScheduleKind::Cosine, ScheduleKind::Uniform][k];
            let s = 1 + ((t - 1) as f64 * frac) as usize;
            let c = DecodeSchedule::new(kind, s, t).counts().unwrap();
            prop_assert_eq!(c.len(), s);
            prop_assert_eq!(c.iter().sum::<usize>(), t);
            prop_assert!(c.iter().all(|&x| x >= 1));
        }

        #[test]
        fn linear_cfg_is_monotone(w in 1.0f64..20.0, a in 0.0f64..1.0, b in 0.0f64..1.0) {
            let s = CfgSchedule { kind: CfgKind::Linear, scale: w };
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            prop_assert!(s.scale_at(lo) <= s.scale_at(hi));
            prop_assert!(s.scale_at(lo) >= 1.0);
        }
    }
}
