#![allow(dead_code)]

use arpg::attention::{build_block_causal_mask, AttentionMask};
use arpg::decoding::make_order;
use arpg::model::{forward_pass1, forward_pass2, ArpgModel, AttentionPattern, ModelConfig};
use arpg::numcore::{kernels, Scalar, Tape};
use arpg::ordering::OrderKind;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn tiny_config() -> ModelConfig {
    ModelConfig {
        vocab_size: 16,
        num_classes: 4,
        hidden: 16,
        heads: 2,
        pass1_layers: 2,
        pass2_layers: 2,
        grid_height: 4,
        grid_width: 4,
        ..ModelConfig::default()
    }
}

pub fn model<T: Scalar>(config: &ModelConfig, seed: u64) -> ArpgModel<T> {
    ArpgModel::init(config, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
}

/// Model whose weights are scaled up so that logits vary visibly with
/// their inputs (the default init is close to uniform output).
pub fn sharp_model(config: &ModelConfig, seed: u64) -> ArpgModel<f64> {
    let mut m = model::<f64>(config, seed);
    for p in m.params_mut() {
        if !p.name.ends_with("norm") {
            for x in p.value.data_mut() {
                *x *= 25.0;
            }
        }
    }
    m
}

/// Greedy decoder without a cache: every step re-runs both passes over
/// the full history on the tape.
pub fn rebuild_greedy(model: &ArpgModel<f64>, class_id: usize, seed: u64) -> Vec<usize> {
    let c = model.config();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let order = make_order(OrderKind::Random, c.grid_height, c.grid_width, &mut rng).unwrap();
    let mut ids = vec![c.class_token(class_id)];
    let mut positions = vec![0];
    let mut placed = Vec::new();
    for &target in order.positions() {
        let mut tape = Tape::new();
        let n = ids.len();
        let p1 = forward_pass1(&mut tape, model, &ids, &positions, &AttentionMask::causal(n), None).unwrap();
        let p2 = forward_pass2(&mut tape, model, &[target], &p1, &AttentionMask::full(1, n), None).unwrap();
        let tok = kernels::argmax(tape.value(p2.logits).data());
        ids.push(tok);
        positions.push(target);
        placed.push(tok);
    }
    order.unshuffle(&placed)
}

/// Logits of `targets` recomputed from scratch over `placed` tokens whose
/// Pass-1 attention follows `pattern` with the given step sizes.
pub fn rebuild_logits<T: Scalar>(
    model: &ArpgModel<T>,
    cond: usize,
    placed: &[usize],
    placed_positions: &[usize],
    steps: &[usize],
    pattern: AttentionPattern,
    targets: &[usize],
) -> Vec<f64> {
    let mut ids = vec![cond];
    ids.extend_from_slice(placed);
    let mut positions = vec![0];
    positions.extend_from_slice(placed_positions);
    let n = ids.len();
    let mask = match pattern {
        AttentionPattern::Causal => AttentionMask::causal(n),
        AttentionPattern::BlockCausal => {
            let mut sizes = vec![1];
            sizes.extend_from_slice(steps);
            build_block_causal_mask(&sizes).unwrap()
        }
    };
    let mut tape = Tape::new();
    let p1 = forward_pass1(&mut tape, model, &ids, &positions, &mask, None).unwrap();
    let p2 = forward_pass2(&mut tape, model, targets, &p1, &AttentionMask::full(targets.len(), n), None).unwrap();
    tape.value(p2.logits).data().iter().map(|x| x.to_f64().unwrap()).collect()
}
