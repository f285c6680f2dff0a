use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::sampling::{cfg_combine, sample_token};
use super::KvCache;
use crate::error::{ArpgError, Result};
use crate::model::{ArpgModel, AttentionPattern};
use crate::numcore::Scalar;
use crate::ordering::{
    fixed_order, sample_permutation, CfgKind, CfgSchedule, DecodeSchedule, OrderKind, Permutation,
    ScheduleKind,
};
use crate::training::TokenGrid;

/// Sampling and scheduling options for one decode call.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DecodeConfig {
    pub steps: usize,
    pub schedule: ScheduleKind,
    pub cfg_kind: CfgKind,
    /// Terminal guidance scale `w`; 1 disables guidance.
    pub cfg_scale: f64,
    /// 0 selects greedy (argmax) decoding.
    pub temperature: f64,
    pub top_k: Option<usize>,
    pub top_p: f64,
    pub pattern: AttentionPattern,
    pub order: OrderKind,
    pub seed: u64,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig {
            steps: 8,
            schedule: ScheduleKind::Arccos,
            cfg_kind: CfgKind::Linear,
            cfg_scale: 1.0,
            temperature: 1.0,
            top_k: None,
            top_p: 1.0,
            pattern: AttentionPattern::BlockCausal,
            order: OrderKind::Random,
            seed: 0,
        }
    }
}

impl DecodeConfig {
    /// Greedy, one token per step, no guidance.
    pub fn sequential(tokens: usize, seed: u64) -> Self {
        DecodeConfig {
            steps: tokens,
            temperature: 0.0,
            pattern: AttentionPattern::Causal,
            seed,
            ..Self::default()
        }
    }

    pub fn cfg(&self) -> CfgSchedule {
        CfgSchedule {
            kind: self.cfg_kind,
            scale: self.cfg_scale,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.temperature >= 0.0) {
            return Err(ArpgError::Config(format!("temperature {} must be ≥ 0", self.temperature)));
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(ArpgError::Config(format!("top_p {} outside (0,1]", self.top_p)));
        }
        if self.steps == 0 {
            return Err(ArpgError::Config("steps must be at least 1".into()));
        }
        if !self.cfg_scale.is_finite() {
            return Err(ArpgError::Config("cfg_scale must be finite".into()));
        }
        Ok(())
    }
}

/// Result of a decode call over a batch sharing one generation order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerationOutput {
    pub grids: Vec<TokenGrid>,
    /// Full order: prefilled positions first, then decoded positions.
    pub order: Permutation,
    /// Prefilled (known) positions at the head of `order`.
    pub prefilled: usize,
    /// Tokens decoded per step.
    pub step_counts: Vec<usize>,
    /// Cache scalars allocated for the whole batch (both guidance branches).
    pub cache_scalars: usize,
}

/// Generation order over `height×width` positions for `kind`.
pub fn make_order<R: rand::Rng + ?Sized>(
    kind: OrderKind,
    height: usize,
    width: usize,
    rng: &mut R,
) -> Result<Permutation> {
    match kind.fixed() {
        Some(f) => fixed_order(f, height, width),
        None => Ok(sample_permutation(height * width, rng)),
    }
}

/// In-flight decode of a batch: the order, the tokens placed so far (in
/// order), the step cursor and the conditional/unconditional caches.
pub struct GenerationState<'m, T> {
    model: &'m ArpgModel<T>,
    config: DecodeConfig,
    height: usize,
    width: usize,
    classes: Vec<usize>,
    guided: bool,
    order: Permutation,
    prefilled: usize,
    counts: Vec<usize>,
    step: usize,
    cursor: usize,
    /// `tokens[b]` in generation order; entries past `cursor` are unset.
    tokens: Vec<Vec<usize>>,
    cache: KvCache<T>,
    rng: ChaCha8Rng,
    pending: usize,
}

impl<'m, T: Scalar> GenerationState<'m, T> {
    /// Prepares a decode over an `height×width` grid. `known` lists raster
    /// positions (1-indexed) with per-sequence tokens that are prefilled
    /// causally in the given order; every other position is decoded along
    /// an order of kind `config.order`. `model` must carry a rotary table
    /// covering `height·width + 1` positions.
    pub fn new(
        model: &'m ArpgModel<T>,
        classes: &[usize],
        height: usize,
        width: usize,
        known: &[(usize, Vec<usize>)],
        config: &DecodeConfig,
    ) -> Result<Self> {
        config.validate()?;
        let mc = model.config();
        let total = height * width;
        if classes.is_empty() {
            return Err(ArpgError::Config("no sequences to decode".into()));
        }
        if let Some(c) = classes.iter().find(|&&c| c > mc.num_classes) {
            return Err(ArpgError::Config(format!("class {c} outside 0..={}", mc.num_classes)));
        }
        if total + 1 > model.rope().max_positions() {
            return Err(ArpgError::Config(format!(
                "{height}×{width} grid needs {} rotary positions, model has {}",
                total + 1,
                model.rope().max_positions()
            )));
        }
        let batch = classes.len();
        let mut is_known = vec![false; total + 1];
        for (p, toks) in known {
            if *p == 0 || *p > total || is_known[*p] {
                return Err(ArpgError::Contract(format!("known position {p} invalid or repeated")));
            }
            if toks.len() != batch || toks.iter().any(|&t| t >= mc.vocab_size) {
                return Err(ArpgError::Contract(format!("known tokens at {p} malformed")));
            }
            is_known[*p] = true;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let full = make_order(config.order, height, width, &mut rng)?;
        let mut order: Vec<usize> = known.iter().map(|(p, _)| *p).collect();
        order.extend(full.positions().iter().copied().filter(|&p| !is_known[p]));
        let order = Permutation::new(order)?;
        let unknown = total - known.len();
        let counts = if unknown == 0 {
            Vec::new()
        } else {
            let steps = if known.is_empty() { config.steps } else { config.steps.min(unknown) };
            DecodeSchedule::new(config.schedule, steps, unknown).counts()?
        };
        let guided = config.cfg().is_active();
        let rows = if guided { 2 * batch } else { batch };
        let mut cache = model.new_cache(rows, total + 1);
        let mut cond: Vec<usize> = classes.iter().map(|&c| if c == mc.num_classes { mc.null_token() } else { mc.class_token(c) }).collect();
        if guided {
            cond.extend(std::iter::repeat(mc.null_token()).take(batch));
        }
        model.pass1_extend(&mut cache, &cond, &[0], AttentionPattern::Causal)?;
        let mut tokens = vec![vec![0usize; total]; batch];
        if !known.is_empty() {
            let positions: Vec<usize> = known.iter().map(|(p, _)| *p).collect();
            let mut ids = Vec::with_capacity(rows * known.len());
            for r in 0..rows {
                ids.extend(known.iter().map(|(_, t)| t[r % batch]));
            }
            model.pass1_extend(&mut cache, &ids, &positions, AttentionPattern::Causal)?;
            for (i, (_, t)) in known.iter().enumerate() {
                for b in 0..batch {
                    tokens[b][i] = t[b];
                }
            }
        }
        Ok(GenerationState {
            model,
            config: config.clone(),
            height,
            width,
            classes: classes.to_vec(),
            guided,
            order,
            prefilled: known.len(),
            counts,
            step: 0,
            cursor: known.len(),
            tokens,
            cache,
            rng,
            pending: 0,
        })
    }

    pub fn is_done(&self) -> bool {
        self.step >= self.counts.len()
    }

    pub fn order(&self) -> &Permutation {
        &self.order
    }

    pub fn step_counts(&self) -> &[usize] {
        &self.counts
    }

    pub fn cache(&self) -> &KvCache<T> {
        &self.cache
    }

    /// Tokens placed so far for sequence `b`, in generation order.
    pub fn placed(&self, b: usize) -> &[usize] {
        &self.tokens[b][..self.cursor]
    }

    /// Feeds any tokens sampled in the previous step into Pass-1.
    fn flush(&mut self) -> Result<()> {
        if self.pending == 0 {
            return Ok(());
        }
        let n = self.pending;
        let start = self.cursor - n;
        let positions = self.order.positions()[start..self.cursor].to_vec();
        let batch = self.classes.len();
        let rows = self.cache.batch();
        let mut ids = Vec::with_capacity(rows * n);
        for r in 0..rows {
            ids.extend_from_slice(&self.tokens[r % batch][start..self.cursor]);
        }
        self.model.pass1_extend(&mut self.cache, &ids, &positions, self.config.pattern)?;
        self.pending = 0;
        Ok(())
    }

    /// Logits `[batch·n × V]` (guidance applied) for the next step's targets.
    pub fn next_logits(&mut self) -> Result<(Vec<usize>, Vec<f64>)> {
        if self.is_done() {
            return Err(ArpgError::Contract("decode already finished".into()));
        }
        self.flush()?;
        let n = self.counts[self.step];
        let targets = self.order.positions()[self.cursor..self.cursor + n].to_vec();
        let raw = self.model.pass2_logits(&self.cache, &targets)?;
        let raw: Vec<f64> = raw.iter().map(|x| x.to_f64().unwrap_or(f64::NAN)).collect();
        let batch = self.classes.len();
        let per_seq = n * self.model.config().vocab_size;
        if !self.guided {
            return Ok((targets, raw));
        }
        let unknown = (self.order.len() - self.prefilled) as f64;
        let u = (self.cursor - self.prefilled) as f64 / unknown;
        let scale = self.config.cfg().scale_at(u);
        let mut out = Vec::with_capacity(batch * per_seq);
        for b in 0..batch {
            let cond = &raw[b * per_seq..(b + 1) * per_seq];
            let uncond = &raw[(batch + b) * per_seq..(batch + b + 1) * per_seq];
            out.extend(cfg_combine(cond, uncond, scale));
        }
        Ok((targets, out))
    }

    /// Decodes the next step's tokens.
    pub fn step(&mut self) -> Result<()> {
        let (targets, logits) = self.next_logits()?;
        let n = targets.len();
        let v = self.model.config().vocab_size;
        let c = &self.config;
        for (b, seq) in self.tokens.iter_mut().enumerate() {
            for j in 0..n {
                let row = &logits[(b * n + j) * v..(b * n + j + 1) * v];
                seq[self.cursor + j] = sample_token(row, c.temperature, c.top_k, c.top_p, &mut self.rng);
            }
        }
        self.cursor += n;
        self.pending = n;
        self.step += 1;
        Ok(())
    }

    /// Runs the remaining steps and unshuffles the result.
    pub fn finish(mut self) -> Result<GenerationOutput> {
        while !self.is_done() {
            self.step()?;
        }
        let grids = self
            .tokens
            .iter()
            .zip(&self.classes)
            .map(|(seq, &class_id)| TokenGrid {
                height: self.height,
                width: self.width,
                tokens: self.order.unshuffle(seq),
                class_id,
            })
            .collect();
        Ok(GenerationOutput {
            grids,
            order: self.order,
            prefilled: self.prefilled,
            step_counts: self.counts,
            cache_scalars: self.cache.scalar_count(),
        })
    }
}

/// Generates one grid per entry of `classes` (a class equal to `C` selects
/// the null condition), sharing one generation order.
pub fn generate_batch<T: Scalar>(
    model: &ArpgModel<T>,
    classes: &[usize],
    config: &DecodeConfig,
) -> Result<GenerationOutput> {
    let c = model.config();
    GenerationState::new(model, classes, c.grid_height, c.grid_width, &[], config)?.finish()
}

/// Generates a single grid of `class_id`.
pub fn generate<T: Scalar>(model: &ArpgModel<T>, class_id: usize, config: &DecodeConfig) -> Result<TokenGrid> {
    Ok(generate_batch(model, &[class_id], config)?.grids.remove(0))
}
