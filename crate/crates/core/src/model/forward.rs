//! Differentiable forward passes recorded on a [`Tape`].

use rand::{Rng, RngCore};

use super::{ArpgModel, Pass1Layer, Pass2Layer};
use crate::attention::AttentionMask;
use crate::error::{ArpgError, Result};
use crate::numcore::{Scalar, Tape, Var};
use crate::ordering::Permutation;

/// Pass-1 results: final hidden states, one `(k, v)` pair per Pass-2 key
/// source (a single pair with the shared projection), and the attention
/// node of every Pass-1 layer.
#[derive(Clone, Debug)]
pub struct Pass1Output {
    pub h: Var,
    pub kv: Vec<(Var, Var)>,
    pub attention: Vec<Var>,
}

/// Pass-2 results: logits, the rotated query of every layer, and every
/// layer's attention node.
#[derive(Clone, Debug)]
pub struct Pass2Output {
    pub logits: Var,
    pub queries: Vec<Var>,
    pub attention: Vec<Var>,
}

/// Teacher-forcing results; logits row `t` predicts `targets[t]`.
#[derive(Clone, Debug)]
pub struct TrainOutput {
    pub loss: Var,
    pub logits: Var,
    pub targets: Vec<usize>,
    pub pass1: Pass1Output,
    pub pass2: Pass2Output,
}

/// Inverted dropout on a recorded value; identity when `rng` is absent.
fn dropout<T: Scalar>(
    tape: &mut Tape<'_, T>,
    x: Var,
    rate: f64,
    rng: &mut Option<&mut dyn RngCore>,
) -> Result<Var> {
    let Some(rng) = rng.as_deref_mut() else {
        return Ok(x);
    };
    if rate <= 0.0 {
        return Ok(x);
    }
    let scale = T::from_f64_lossy(1.0 / (1.0 - rate));
    let keep = (0..tape.value(x).numel())
        .map(|_| if rng.gen::<f64>() < rate { T::zero() } else { scale })
        .collect();
    tape.dropout(x, keep)
}

struct Ffn {
    norm: usize,
    gate: usize,
    up: usize,
    down: usize,
}

fn ffn_block<'a, T: Scalar>(
    tape: &mut Tape<'a, T>,
    model: &'a ArpgModel<T>,
    f: Ffn,
    x: Var,
    rng: &mut Option<&mut dyn RngCore>,
) -> Result<Var> {
    let p = model.params();
    let eps = T::from_f64_lossy(model.config().norm_eps);
    let g = tape.param(f.norm, &p[f.norm]);
    let xn = tape.rms_norm(x, g, eps)?;
    let wg = tape.param(f.gate, &p[f.gate]);
    let wu = tape.param(f.up, &p[f.up]);
    let wd = tape.param(f.down, &p[f.down]);
    let gate = tape.matmul(xn, wg)?;
    let up = tape.matmul(xn, wu)?;
    let act = tape.silu(gate);
    let mid = tape.mul(act, up)?;
    let y = tape.matmul(mid, wd)?;
    let y = dropout(tape, y, model.config().dropout, rng)?;
    tape.add(x, y)
}

fn pass1_layer<'a, T: Scalar>(
    tape: &mut Tape<'a, T>,
    model: &'a ArpgModel<T>,
    layer: &Pass1Layer,
    x: Var,
    positions: &[usize],
    mask: &AttentionMask,
    rng: &mut Option<&mut dyn RngCore>,
) -> Result<(Var, Var)> {
    let p = model.params();
    let heads = model.config().heads;
    let eps = T::from_f64_lossy(model.config().norm_eps);
    let g = tape.param(layer.attn_norm, &p[layer.attn_norm]);
    let xn = tape.rms_norm(x, g, eps)?;
    let wq = tape.param(layer.wq, &p[layer.wq]);
    let wk = tape.param(layer.wk, &p[layer.wk]);
    let wv = tape.param(layer.wv, &p[layer.wv]);
    let wo = tape.param(layer.wo, &p[layer.wo]);
    let q = tape.matmul(xn, wq)?;
    let k = tape.matmul(xn, wk)?;
    let v = tape.matmul(xn, wv)?;
    let q = tape.rope(q, positions, heads, model.rope())?;
    let k = tape.rope(k, positions, heads, model.rope())?;
    let attn = tape.attention(q, k, v, mask, model.head_layout())?;
    let o = tape.matmul(attn, wo)?;
    let o = dropout(tape, o, model.config().dropout, rng)?;
    let x = tape.add(x, o)?;
    let ffn = Ffn {
        norm: layer.ffn_norm,
        gate: layer.w_gate,
        up: layer.w_up,
        down: layer.w_down,
    };
    Ok((ffn_block(tape, model, ffn, x, rng)?, attn))
}

/// Pass-1: embeds `ids` (condition token first), runs the self-attention
/// stack under `mask` with rotary embedding at `positions`, then applies
/// `kv_norm` and the key/value projection(s), rotating keys at the same
/// positions.
pub fn forward_pass1<'a, T: Scalar>(
    tape: &mut Tape<'a, T>,
    model: &'a ArpgModel<T>,
    ids: &[usize],
    positions: &[usize],
    mask: &AttentionMask,
    mut rng: Option<&mut dyn RngCore>,
) -> Result<Pass1Output> {
    if ids.is_empty() || ids.len() != positions.len() {
        return Err(ArpgError::Contract(format!(
            "pass1 got {} tokens and {} positions",
            ids.len(),
            positions.len()
        )));
    }
    if mask.query_len() != ids.len() || mask.key_len() != ids.len() {
        return Err(ArpgError::Contract(format!(
            "pass1 mask is {}×{} for {} tokens",
            mask.query_len(),
            mask.key_len(),
            ids.len()
        )));
    }
    let p = model.params();
    let lay = model.layout();
    let cfg = model.config();
    let table = tape.param(lay.embedding, &p[lay.embedding]);
    let mut x = tape.embedding(table, ids)?;
    let mut attention = Vec::with_capacity(lay.pass1.len());
    for layer in &lay.pass1 {
        let (nx, a) = pass1_layer(tape, model, layer, x, positions, mask, &mut rng)?;
        x = nx;
        attention.push(a);
    }
    let h = x;
    let g = tape.param(lay.kv_norm, &p[lay.kv_norm]);
    let hn = tape.rms_norm(h, g, T::from_f64_lossy(cfg.norm_eps))?;
    let mut kv = Vec::new();
    match lay.kv_proj {
        Some(w) => {
            let wkv = tape.param(w, &p[w]);
            let both = tape.matmul(hn, wkv)?;
            let k = tape.slice_cols(both, 0, cfg.hidden)?;
            let v = tape.slice_cols(both, cfg.hidden, 2 * cfg.hidden)?;
            let k = tape.rope(k, positions, cfg.heads, model.rope())?;
            kv.push((k, v));
        }
        None => {
            for layer in &lay.pass2 {
                let (wk, wv) = layer.kv.expect("unshared layers own key/value weights");
                let wk = tape.param(wk, &p[wk]);
                let wv = tape.param(wv, &p[wv]);
                let k = tape.matmul(hn, wk)?;
                let k = tape.rope(k, positions, cfg.heads, model.rope())?;
                let v = tape.matmul(hn, wv)?;
                kv.push((k, v));
            }
        }
    }
    Ok(Pass1Output { h, kv, attention })
}

fn pass2_layer<'a, T: Scalar>(
    tape: &mut Tape<'a, T>,
    model: &'a ArpgModel<T>,
    layer: &Pass2Layer,
    o: Var,
    kv: (Var, Var),
    targets: &[usize],
    mask: &AttentionMask,
    rng: &mut Option<&mut dyn RngCore>,
) -> Result<(Var, Var, Var)> {
    let p = model.params();
    let heads = model.config().heads;
    let eps = T::from_f64_lossy(model.config().norm_eps);
    let g = tape.param(layer.attn_norm, &p[layer.attn_norm]);
    let on = tape.rms_norm(o, g, eps)?;
    let wq = tape.param(layer.wq, &p[layer.wq]);
    let wo = tape.param(layer.wo, &p[layer.wo]);
    let q = tape.matmul(on, wq)?;
    let q = tape.rope(q, targets, heads, model.rope())?;
    let attn = tape.attention(q, kv.0, kv.1, mask, model.head_layout())?;
    let y = tape.matmul(attn, wo)?;
    let y = dropout(tape, y, model.config().dropout, rng)?;
    let o = tape.add(o, y)?;
    let ffn = Ffn {
        norm: layer.ffn_norm,
        gate: layer.w_gate,
        up: layer.w_up,
        down: layer.w_down,
    };
    Ok((ffn_block(tape, model, ffn, o, rng)?, q, attn))
}

/// Pass-2: every query starts from the [MASK] embedding, is made
/// target-aware by rotary embedding at its target position, and
/// cross-attends to the Pass-1 keys/values under `mask`. Queries never see
/// each other.
pub fn forward_pass2<'a, T: Scalar>(
    tape: &mut Tape<'a, T>,
    model: &'a ArpgModel<T>,
    targets: &[usize],
    pass1: &Pass1Output,
    mask: &AttentionMask,
    mut rng: Option<&mut dyn RngCore>,
) -> Result<Pass2Output> {
    let (k0, _) = *pass1
        .kv
        .first()
        .ok_or_else(|| ArpgError::Contract("pass2 needs key/value rows".into()))?;
    let kv_rows = tape.value(k0).rows();
    if kv_rows == 0 {
        return Err(ArpgError::Contract("pass2 needs key/value rows".into()));
    }
    if mask.query_len() != targets.len() || mask.key_len() != kv_rows {
        return Err(ArpgError::Contract(format!(
            "pass2 mask is {}×{} for {} queries over {kv_rows} keys",
            mask.query_len(),
            mask.key_len(),
            targets.len()
        )));
    }
    if targets.contains(&0) {
        return Err(ArpgError::Contract("target position 0 is the condition slot".into()));
    }
    let p = model.params();
    let lay = model.layout();
    let cfg = model.config();
    let table = tape.param(lay.embedding, &p[lay.embedding]);
    let mut o = tape.embedding(table, &vec![cfg.mask_token(); targets.len()])?;
    let mut queries = Vec::with_capacity(lay.pass2.len());
    let mut attention = Vec::with_capacity(lay.pass2.len());
    for (j, layer) in lay.pass2.iter().enumerate() {
        let kv = pass1.kv[if lay.kv_proj.is_some() { 0 } else { j }];
        let (no, q, a) = pass2_layer(tape, model, layer, o, kv, targets, mask, &mut rng)?;
        o = no;
        queries.push(q);
        attention.push(a);
    }
    let g = tape.param(lay.final_norm, &p[lay.final_norm]);
    let on = tape.rms_norm(o, g, T::from_f64_lossy(cfg.norm_eps))?;
    let head = tape.param(lay.head, &p[lay.head]);
    let logits = tape.matmul(on, head)?;
    Ok(Pass2Output {
        logits,
        queries,
        attention,
    })
}

/// Teacher-forcing forward over one sequence. Tokens and positions are
/// shuffled by `order`, the condition token is prepended at position 0,
/// Pass-1 sees `[0, τ₁..τ_{T−1}]` causally and Pass-2 predicts the tokens at
/// `τ₁..τ_T` (queries right-shifted by one slot).
pub fn forward_train<'a, T: Scalar>(
    tape: &mut Tape<'a, T>,
    model: &'a ArpgModel<T>,
    tokens: &[usize],
    condition: usize,
    order: &Permutation,
    mut rng: Option<&mut dyn RngCore>,
) -> Result<TrainOutput> {
    let cfg = model.config();
    let t = cfg.seq_len();
    if tokens.len() != t || order.len() != t {
        return Err(ArpgError::Contract(format!(
            "expected {t} tokens and order entries, got {} and {}",
            tokens.len(),
            order.len()
        )));
    }
    if let Some(bad) = tokens.iter().find(|&&x| x >= cfg.vocab_size) {
        return Err(ArpgError::Index(format!("token {bad} outside vocabulary")));
    }
    let targets = order.shuffle(tokens);
    let mut ids = Vec::with_capacity(t);
    ids.push(condition);
    ids.extend_from_slice(&targets[..t - 1]);
    let mut positions = Vec::with_capacity(t);
    positions.push(0);
    positions.extend_from_slice(&order.positions()[..t - 1]);
    let pass1 = forward_pass1(
        tape,
        model,
        &ids,
        &positions,
        &AttentionMask::causal(t),
        rng.as_mut().map(|r| &mut **r as &mut dyn RngCore),
    )?;
    let cross = AttentionMask::cross_steps(&vec![1; t])?;
    let pass2 = forward_pass2(tape, model, order.positions(), &pass1, &cross, rng)?;
    let loss = tape.cross_entropy(pass2.logits, &targets)?;
    Ok(TrainOutput {
        loss,
        logits: pass2.logits,
        targets,
        pass1,
        pass2,
    })
}
