//! Steps × pattern decode sweep.

use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::BenchConfig;
use crate::decoding::{DecodeConfig, GenerationOutput, GenerationState};
use crate::error::{ArpgError, Result};
use crate::model::{ArpgModel, AttentionPattern};
use crate::numcore::Scalar;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub steps: usize,
    pub pattern: AttentionPattern,
    pub wall_ms_mean: f64,
    pub wall_ms_p50: f64,
    pub wall_ms_p95: f64,
    pub tokens_per_s: f64,
    /// Cache scalars allocated across all streams and guidance branches.
    pub cache_scalars: usize,
    /// `slots·2·d·(1+T)` per cached row, times the cached rows.
    pub cache_closed_form: usize,
    pub resident_bytes_estimate: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub batch: usize,
    pub tokens: usize,
    pub repeats: usize,
    pub streams: usize,
    pub cfg_scale: f64,
    pub rows: Vec<BenchRow>,
    /// Rows whose mean wall time exceeds that of a row with more steps.
    pub monotonicity_violations: Vec<String>,
}

impl BenchReport {
    pub fn row(&self, steps: usize, pattern: AttentionPattern) -> Option<&BenchRow> {
        self.rows.iter().find(|r| r.steps == steps && r.pattern == pattern)
    }

    pub fn to_table(&self) -> String {
        let header = [
            "pattern", "steps", "mean_ms", "p50_ms", "p95_ms", "tok/s", "cache", "closed_form", "resident_B",
        ];
        let mut cells: Vec<Vec<String>> = vec![header.iter().map(|s| s.to_string()).collect()];
        for r in &self.rows {
            cells.push(vec![
                r.pattern.to_string(),
                r.steps.to_string(),
                format!("{:.2}", r.wall_ms_mean),
                format!("{:.2}", r.wall_ms_p50),
                format!("{:.2}", r.wall_ms_p95),
                format!("{:.1}", r.tokens_per_s),
                r.cache_scalars.to_string(),
                r.cache_closed_form.to_string(),
                r.resident_bytes_estimate.to_string(),
            ]);
        }
        let widths: Vec<usize> = (0..header.len())
            .map(|c| cells.iter().map(|row| row[c].len()).max().unwrap_or(0))
            .collect();
        let mut out = String::new();
        for row in &cells {
            let line: Vec<String> = row.iter().zip(&widths).map(|(s, w)| format!("{s:>w$}")).collect();
            out.push_str(line.join("  ").trim_end());
            out.push('\n');
        }
        if self.monotonicity_violations.is_empty() {
            out.push_str("monotonicity: ok\n");
        } else {
            for v in &self.monotonicity_violations {
                out.push_str(&format!("monotonicity violated: {v}\n"));
            }
        }
        out
    }
}

fn percentile(sorted: &[f64], p: f64) -> f64 {
    let idx = ((sorted.len() - 1) as f64 * p).round() as usize;
    sorted[idx]
}

/// Decodes `batch` sequences split across `streams` independent states.
fn decode_streams<T: Scalar>(
    model: &ArpgModel<T>,
    batch: usize,
    streams: usize,
    config: &DecodeConfig,
) -> Result<Vec<GenerationOutput>> {
    let c = model.config();
    let per = batch.div_ceil(streams);
    let chunks: Vec<Vec<usize>> = (0..batch)
        .map(|i| i % c.num_classes)
        .collect::<Vec<_>>()
        .chunks(per)
        .map(<[usize]>::to_vec)
        .collect();
    chunks
        .into_par_iter()
        .enumerate()
        .map(|(s, classes)| {
            let cfg = DecodeConfig {
                seed: config.seed.wrapping_add(s as u64),
                ..config.clone()
            };
            GenerationState::new(model, &classes, c.grid_height, c.grid_width, &[], &cfg)?.finish()
        })
        .collect()
}

/// Times decoding of a batch for every configured step count under both
/// attention patterns. One warm-up decode per row is discarded.
pub fn run_bench<T: Scalar>(model: &ArpgModel<T>, bench: &BenchConfig, decode: &DecodeConfig) -> Result<BenchReport> {
    let c = model.config();
    let t = c.seq_len();
    if bench.batch == 0 || bench.repeats == 0 || bench.streams == 0 {
        return Err(ArpgError::Config("bench batch, repeats and streams must be positive".into()));
    }
    let mut steps = bench.steps.clone();
    if !steps.contains(&t) {
        steps.push(t);
    }
    steps.sort_unstable_by(|a, b| b.cmp(a));
    steps.dedup();
    if let Some(&s) = steps.iter().find(|&&s| s == 0 || s > t) {
        return Err(ArpgError::Config(format!("bench step count {s} outside 1..={t}")));
    }
    let scalar_bytes = std::mem::size_of::<T>();
    let mut rows = Vec::new();
    let mut violations = Vec::new();
    for pattern in [AttentionPattern::Causal, AttentionPattern::BlockCausal] {
        let mut prev: Option<(usize, f64)> = None;
        for &s in &steps {
            let cfg = DecodeConfig {
                steps: s,
                pattern,
                ..decode.clone()
            };
            decode_streams(model, bench.batch, bench.streams, &cfg)?;
            let mut times = Vec::with_capacity(bench.repeats);
            let mut outs = Vec::new();
            for _ in 0..bench.repeats {
                let start = Instant::now();
                outs = decode_streams(model, bench.batch, bench.streams, &cfg)?;
                times.push(start.elapsed().as_secs_f64() * 1e3);
            }
            let mean = times.iter().sum::<f64>() / times.len() as f64;
            let mut sorted = times.clone();
            sorted.sort_by(f64::total_cmp);
            let cache_scalars: usize = outs.iter().map(|o| o.cache_scalars).sum();
            let cached_rows = bench.batch * if cfg.cfg().is_active() { 2 } else { 1 };
            let closed = c.cache_slots() * 2 * c.hidden * (1 + t) * cached_rows;
            let max_q = outs.iter().flat_map(|o| o.step_counts.iter()).copied().max().unwrap_or(0);
            let resident = (model.num_parameters() + cache_scalars + cached_rows * max_q * c.vocab_size) * scalar_bytes;
            if let Some((ps, pm)) = prev {
                if mean > pm {
                    violations.push(format!("{pattern}: S={s} ({mean:.2} ms) slower than S={ps} ({pm:.2} ms)"));
                }
            }
            prev = Some((s, mean));
            rows.push(BenchRow {
                steps: s,
                pattern,
                wall_ms_mean: mean,
                wall_ms_p50: percentile(&sorted, 0.5),
                wall_ms_p95: percentile(&sorted, 0.95),
                tokens_per_s: (bench.batch * t) as f64 / (mean / 1e3),
                cache_scalars,
                cache_closed_form: closed,
                resident_bytes_estimate: resident,
            });
        }
    }
    Ok(BenchReport {
        batch: bench.batch,
        tokens: t,
        repeats: bench.repeats,
        streams: bench.streams,
        cfg_scale: decode.cfg_scale,
        rows,
        monotonicity_violations: violations,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use rand::SeedableRng;

    #[test]
    fn tiny_sweep_rows_and_cache_form() {
        let config = ModelConfig {
            hidden: 16,
            heads: 2,
            pass1_layers: 1,
            pass2_layers: 1,
            grid_height: 2,
            grid_width: 2,
            ..ModelConfig::default()
        };
        let model = ArpgModel::<f32>::init(&config, &mut rand_chacha::ChaCha8Rng::seed_from_u64(0)).unwrap();
        let bench = BenchConfig {
            steps: vec![2],
            batch: 3,
            repeats: 2,
            streams: 2,
        };
        let decode = DecodeConfig {
            cfg_scale: 2.0,
            ..DecodeConfig::default()
        };
        let r = run_bench(&model, &bench, &decode).unwrap();
        assert_eq!(r.rows.len(), 4);
        for p in [AttentionPattern::Causal, AttentionPattern::BlockCausal] {
            let row = r.row(4, p).unwrap();
            assert_eq!(row.cache_scalars, row.cache_closed_form);
            assert_eq!(row.cache_closed_form, 2 * 2 * 16 * 5 * 6);
        }
        assert!(r.to_table().contains("block_causal"));
    }
}
