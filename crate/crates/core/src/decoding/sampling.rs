use rand::distributions::{Distribution, WeightedIndex};
use rand::Rng;

use crate::numcore::kernels;

/// Classifier-free guidance `u + s·(c − u)`, evaluated as `(1 − s)·u + s·c`
/// so that `s = 1` returns `cond` and `s = 0` returns `uncond` exactly.
pub fn cfg_combine(cond: &[f64], uncond: &[f64], scale: f64) -> Vec<f64> {
    cond.iter()
        .zip(uncond)
        .map(|(&c, &u)| (1.0 - scale) * u + scale * c)
        .collect()
}

/// Token probabilities after temperature, top-k and nucleus filtering,
/// renormalized over the kept support. Temperature 0 yields a one-hot
/// distribution on the argmax.
pub fn filtered_probs(logits: &[f64], temperature: f64, top_k: Option<usize>, top_p: f64) -> Vec<f64> {
    let n = logits.len();
    if temperature <= 0.0 {
        let mut p = vec![0.0; n];
        p[kernels::argmax(logits)] = 1.0;
        return p;
    }
    let scaled: Vec<f64> = logits.iter().map(|l| l / temperature).collect();
    let mut probs = kernels::softmax_rows(&scaled, n);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
    let mut keep = vec![false; n];
    let k = top_k.filter(|&k| k > 0).unwrap_or(n).min(n);
    let mut cum = 0.0;
    for (rank, &i) in order.iter().enumerate() {
        if rank >= k || (top_p < 1.0 && cum >= top_p - 1e-9) {
            break;
        }
        keep[i] = true;
        cum += probs[i];
    }
    let total: f64 = (0..n).filter(|&i| keep[i]).map(|i| probs[i]).sum();
    for (i, p) in probs.iter_mut().enumerate() {
        *p = if keep[i] { *p / total } else { 0.0 };
    }
    probs
}

/// Samples one token from `logits` after filtering.
pub fn sample_token<R: Rng + ?Sized>(
    logits: &[f64],
    temperature: f64,
    top_k: Option<usize>,
    top_p: f64,
    rng: &mut R,
) -> usize {
    if temperature <= 0.0 {
        return kernels::argmax(logits);
    }
    let probs = filtered_probs(logits, temperature, top_k, top_p);
    WeightedIndex::new(&probs)
        .map(|d| d.sample(rng))
        .unwrap_or_else(|_| kernels::argmax(logits))
}

/// Samples one token per row of `logits[rows × vocab]`.
pub fn sample_tokens<R: Rng + ?Sized>(
    logits: &[f64],
    vocab: usize,
    temperature: f64,
    top_k: Option<usize>,
    top_p: f64,
    rng: &mut R,
) -> Vec<usize> {
    logits
        .chunks_exact(vocab)
        .map(|row| sample_token(row, temperature, top_k, top_p, rng))
        .collect()
}
