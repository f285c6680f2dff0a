use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{ToyDataset, TokenGrid};
use crate::decoding::{generate_batch, DecodeConfig};
use crate::error::Result;
use crate::model::{forward_train, ArpgModel};
use crate::numcore::{kernels, Scalar, Tape};
use crate::ordering::sample_permutation;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    /// Argmax accuracy of teacher-forced predictions under random orders.
    pub token_accuracy: f64,
    /// Fraction of generated grids the verifier assigns to their class.
    pub validity: f64,
    pub per_class_validity: Vec<f64>,
    pub generated: usize,
}

/// Teacher-forcing argmax accuracy with one random order per sample drawn
/// from `seed`.
pub fn teacher_forcing_accuracy<T: Scalar>(model: &ArpgModel<T>, data: &[TokenGrid], seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = model.config();
    let v = cfg.vocab_size;
    let (mut hit, mut total) = (0usize, 0usize);
    for grid in data {
        let order = sample_permutation(cfg.seq_len(), &mut rng);
        let mut tape = Tape::new();
        let out = forward_train(&mut tape, model, &grid.tokens, cfg.class_token(grid.class_id), &order, None)?;
        let logits = tape.value(out.logits).data();
        for (t, &target) in out.targets.iter().enumerate() {
            hit += usize::from(kernels::argmax(&logits[t * v..(t + 1) * v]) == target);
            total += 1;
        }
    }
    Ok(hit as f64 / total.max(1) as f64)
}

/// Verifier validity of `per_class` generated grids for every class.
pub fn generation_validity<T: Scalar>(
    model: &ArpgModel<T>,
    dataset: &ToyDataset,
    decode: &DecodeConfig,
    per_class: usize,
) -> Result<(f64, Vec<f64>)> {
    let classes = model.config().num_classes;
    let mut per = Vec::with_capacity(classes);
    for c in 0..classes {
        let cfg = DecodeConfig {
            seed: decode.seed.wrapping_add(c as u64 * 7919),
            ..decode.clone()
        };
        let out = generate_batch(model, &vec![c; per_class], &cfg)?;
        let ok = out.grids.iter().filter(|g| dataset.is_valid(g, c)).count();
        per.push(ok as f64 / per_class.max(1) as f64);
    }
    let mean = per.iter().sum::<f64>() / classes as f64;
    Ok((mean, per))
}

/// Token accuracy on `data` plus generation validity.
pub fn evaluate<T: Scalar>(
    model: &ArpgModel<T>,
    dataset: &ToyDataset,
    data: &[TokenGrid],
    decode: &DecodeConfig,
    per_class: usize,
) -> Result<EvalMetrics> {
    let token_accuracy = teacher_forcing_accuracy(model, data, decode.seed)?;
    let (validity, per_class_validity) = generation_validity(model, dataset, decode, per_class)?;
    Ok(EvalMetrics {
        token_accuracy,
        validity,
        per_class_validity,
        generated: per_class * model.config().num_classes,
    })
}
