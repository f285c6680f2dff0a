use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::optim::{adamw_update, clip_grad_norm, cosine_lr, AdamWConfig, OptimState};
use super::TokenGrid;
use crate::error::{ArpgError, Result};
use crate::model::{forward_train, ArpgModel, Checkpoint};
use crate::numcore::{kernels, Scalar, Tape};
use crate::ordering::{sample_permutation, Permutation};

/// Optimization hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub dataset_size: usize,
    pub noise: f64,
    pub data_seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub warmup_ratio: f64,
    pub grad_clip: f64,
    /// Probability of replacing the class token by the null class.
    pub class_dropout: f64,
    pub adamw: AdamWConfig,
    pub seed: u64,
    /// Samples per gradient-accumulation chunk; chunks are reduced in a
    /// fixed order so results do not depend on the thread count.
    pub chunk_size: usize,
    /// Steps between snapshots (0 disables).
    pub snapshot_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            dataset_size: 4096,
            noise: 0.0,
            data_seed: 0,
            epochs: 3,
            batch_size: 32,
            lr: 2e-3,
            warmup_ratio: 0.1,
            grad_clip: 1.0,
            class_dropout: 0.1,
            adamw: AdamWConfig::default(),
            seed: 0,
            chunk_size: 4,
            snapshot_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn steps_per_epoch(&self) -> u64 {
        (self.dataset_size / self.batch_size.max(1)).max(1) as u64
    }

    pub fn total_steps(&self) -> u64 {
        self.steps_per_epoch() * self.epochs as u64
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.dataset_size == 0 || self.chunk_size == 0 {
            return Err(ArpgError::Config(
                "batch_size, dataset_size and chunk_size must be positive".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.class_dropout) || !(0.0..=1.0).contains(&self.warmup_ratio) {
            return Err(ArpgError::Config("class_dropout and warmup_ratio must lie in [0,1]".into()));
        }
        if !(self.lr > 0.0) {
            return Err(ArpgError::Config(format!("learning rate {} must be positive", self.lr)));
        }
        Ok(())
    }
}

/// Outcome of one optimizer step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepStats {
    pub step: u64,
    pub loss: f64,
    pub lr: f64,
    pub grad_norm: f64,
    pub wall_ms: f64,
}

struct Job<'d> {
    grid: &'d TokenGrid,
    condition: usize,
    order: Permutation,
    dropout_seed: u64,
}

/// Loss and summed parameter gradients of `jobs`, each sample contributing
/// its per-sequence mean cross-entropy.
fn chunk_gradients<T: Scalar>(model: &ArpgModel<T>, jobs: &[Job<'_>]) -> Result<(f64, Vec<Vec<T>>)> {
    let mut acc: Vec<Vec<T>> = model.params().iter().map(|p| vec![T::zero(); p.numel()]).collect();
    let mut loss = 0.0;
    let dropout = model.config().dropout > 0.0;
    for job in jobs {
        let mut drng = ChaCha8Rng::seed_from_u64(job.dropout_seed);
        let mut tape = Tape::new();
        let rng = dropout.then_some(&mut drng as &mut dyn RngCore);
        let out = forward_train(&mut tape, model, &job.grid.tokens, job.condition, &job.order, rng)?;
        tape.backward(out.loss)?;
        tape.accumulate_param_grads(&mut acc);
        loss += tape.value(out.loss).item()?.to_f64().unwrap_or(f64::NAN);
    }
    Ok((loss, acc))
}

/// One optimization step on `batch`: fresh permutation and class dropout
/// per sample, mean loss over the batch, gradient clipping, learning rate
/// from the warmup-cosine schedule, AdamW update. Model gradients are
/// zeroed on entry.
pub fn train_step<T: Scalar>(
    model: &mut ArpgModel<T>,
    optim: &mut OptimState<T>,
    batch: &[TokenGrid],
    config: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<StepStats> {
    let start = Instant::now();
    if batch.is_empty() {
        return Err(ArpgError::Contract("empty training batch".into()));
    }
    model.zero_grad();
    let cfg = model.config().clone();
    let jobs: Vec<Job<'_>> = batch
        .iter()
        .map(|grid| {
            let order = sample_permutation(cfg.seq_len(), rng);
            let condition = if rng.gen::<f64>() < config.class_dropout {
                cfg.null_token()
            } else {
                cfg.class_token(grid.class_id)
            };
            Job {
                grid,
                condition,
                order,
                dropout_seed: rng.gen(),
            }
        })
        .collect();
    let frozen: &ArpgModel<T> = model;
    let partials: Vec<Result<(f64, Vec<Vec<T>>)>> = jobs
        .par_chunks(config.chunk_size.max(1))
        .map(|chunk| chunk_gradients(frozen, chunk))
        .collect();
    let mut loss = 0.0;
    let mut grads: Vec<Vec<T>> = model.params().iter().map(|p| vec![T::zero(); p.numel()]).collect();
    for part in partials {
        let (l, g) = part?;
        loss += l;
        for (acc, x) in grads.iter_mut().zip(&g) {
            kernels::add_assign(acc, x);
        }
    }
    let n = batch.len() as f64;
    loss /= n;
    let step = optim.step;
    if !loss.is_finite() {
        return Err(ArpgError::NonFiniteLoss {
            step,
            detail: format!("batch of {} samples produced loss {loss}", batch.len()),
        });
    }
    let inv_n = T::from_f64_lossy(1.0 / n);
    for (p, g) in model.params_mut().iter_mut().zip(grads) {
        p.grad = g.into_iter().map(|x| x * inv_n).collect();
    }
    let norm = clip_grad_norm(model.params_mut(), config.grad_clip);
    if !norm.is_finite() {
        return Err(ArpgError::NonFiniteLoss {
            step,
            detail: "gradient norm is not finite".into(),
        });
    }
    let lr = cosine_lr(config.lr, step, config.total_steps(), config.warmup_ratio);
    adamw_update(optim, model.params_mut(), lr);
    Ok(StepStats {
        step,
        loss,
        lr,
        grad_norm: norm,
        wall_ms: start.elapsed().as_secs_f64() * 1e3,
    })
}

/// Model, optimizer and data of a training run. All randomness is derived
/// from `(config.seed, step)`, so a run resumed from a snapshot continues
/// exactly like an uninterrupted one.
#[derive(Clone, Debug)]
pub struct Trainer<T> {
    pub model: ArpgModel<T>,
    pub optim: OptimState<T>,
    pub config: TrainConfig,
    data: Vec<TokenGrid>,
}

impl<T: Scalar> Trainer<T> {
    pub fn new(model: ArpgModel<T>, config: TrainConfig, data: Vec<TokenGrid>) -> Result<Self> {
        config.validate()?;
        if data.is_empty() {
            return Err(ArpgError::Config("training data is empty".into()));
        }
        let optim = OptimState::new(model.params(), config.adamw);
        Ok(Trainer {
            model,
            optim,
            config,
            data,
        })
    }

    pub fn step(&self) -> u64 {
        self.optim.step
    }

    pub fn is_done(&self) -> bool {
        self.optim.step >= self.config.total_steps()
    }

    pub fn data(&self) -> &[TokenGrid] {
        &self.data
    }

    fn batch_for(&self, step: u64) -> Vec<TokenGrid> {
        let spe = self.config.steps_per_epoch();
        let epoch = step / spe;
        let mut idx: Vec<usize> = (0..self.data.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        rng.set_stream((1 << 40) + epoch);
        idx.shuffle(&mut rng);
        let b = self.config.batch_size;
        let start = ((step % spe) as usize * b) % idx.len();
        (0..b).map(|i| self.data[idx[(start + i) % idx.len()]].clone()).collect()
    }

    pub fn train_step(&mut self) -> Result<StepStats> {
        let step = self.optim.step;
        let batch = self.batch_for(step);
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        rng.set_stream(step);
        train_step(&mut self.model, &mut self.optim, &batch, &self.config, &mut rng)
    }

    /// Parameters, optimizer moments and run metadata.
    pub fn snapshot(&self) -> Checkpoint<T> {
        let mut ck = Checkpoint::from_model(&self.model);
        ck.tensors.extend(self.optim.to_tensors(self.model.params()));
        ck.meta = serde_json::json!({
            "step": self.optim.step,
            "train": self.config,
        });
        ck
    }

    /// Restores a run from [`Trainer::snapshot`] output.
    pub fn resume(ck: &Checkpoint<T>, data: Vec<TokenGrid>) -> Result<Self> {
        let model = ck.model()?;
        let step = ck.meta.get("step").and_then(|s| s.as_u64()).ok_or_else(|| {
            ArpgError::Config("snapshot metadata lacks the training step".into())
        })?;
        let config: TrainConfig = ck
            .meta
            .get("train")
            .cloned()
            .map(serde_json::from_value)
            .transpose()
            .map_err(|e| ArpgError::Config(format!("snapshot training config: {e}")))?
            .ok_or_else(|| ArpgError::Config("snapshot metadata lacks the training config".into()))?;
        let optim = OptimState::from_tensors(model.params(), &ck.tensors, config.adamw, step)?;
        let mut t = Trainer::new(model, config, data)?;
        t.optim = optim;
        Ok(t)
    }
}
