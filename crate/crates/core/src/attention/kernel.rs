//! Multi-head softmax attention with an explicit, hand-derived backward.
//!
//! Forward per head and query row `i` (scale `s = 1/√head_dim`):
//!   `S_ij = s·q_i·k_jᵀ`, `P_i = softmax(S_i)` over visible keys, `o_i = Σ_j P_ij v_j`.
//! Backward:
//!   `dP_ij = do_i·v_jᵀ`, `dS_ij = P_ij (dP_ij − do_i·o_iᵀ)`,
//!   `dq_i = s·Σ_j dS_ij k_j`, `dk_j = s·Σ_i dS_ij q_i`, `dv_j = Σ_i P_ij do_i`.
//! Masked keys are skipped outright, which equals an additive −∞. A query
//! with no visible key outputs zeros.

use super::AttentionMask;
use crate::error::{ArpgError, Result};
use crate::numcore::Scalar;

/// Head layout of a `[rows × heads·head_dim]` activation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct HeadLayout {
    pub heads: usize,
    pub head_dim: usize,
}

impl HeadLayout {
    pub fn width(&self) -> usize {
        self.heads * self.head_dim
    }

    fn scale<T: Scalar>(&self) -> T {
        T::one() / T::from_usize(self.head_dim).unwrap().sqrt()
    }
}

/// Forward outputs retained for the backward pass.
#[derive(Clone, Debug)]
pub struct AttentionSaved<T> {
    /// `[heads × query_len × key_len]`, zero where masked.
    pub probs: Vec<T>,
    pub out: Vec<T>,
}

fn check_shapes<T>(
    q: &[T],
    k: &[T],
    v: &[T],
    mask: &AttentionMask,
    layout: HeadLayout,
) -> Result<()> {
    let w = layout.width();
    if q.len() != mask.query_len() * w
        || k.len() != mask.key_len() * w
        || v.len() != mask.key_len() * w
    {
        return Err(ArpgError::Dimension(format!(
            "attention q/k/v have {}/{}/{} elements, mask is {}×{} with width {w}",
            q.len(),
            k.len(),
            v.len(),
            mask.query_len(),
            mask.key_len()
        )));
    }
    Ok(())
}

#[inline]
fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |s, (x, y)| s + *x * *y)
}

/// Computes one query row of one head. `scores` is scratch of length ≥ limit.
#[inline]
fn attend_row<T: Scalar>(
    qi: &[T],
    k: &[T],
    v: &[T],
    limit: usize,
    h: usize,
    layout: HeadLayout,
    scale: T,
    scores: &mut [T],
    out: &mut [T],
) {
    let (w, hd) = (layout.width(), layout.head_dim);
    out.iter_mut().for_each(|o| *o = T::zero());
    if limit == 0 {
        return;
    }
    let mut max = T::neg_infinity();
    for j in 0..limit {
        let kj = &k[j * w + h * hd..j * w + (h + 1) * hd];
        let s = dot(qi, kj) * scale;
        scores[j] = s;
        max = max.max(s);
    }
    let mut sum = T::zero();
    for s in scores[..limit].iter_mut() {
        *s = (*s - max).exp();
        sum = sum + *s;
    }
    for j in 0..limit {
        let p = scores[j] / sum;
        scores[j] = p;
        let vj = &v[j * w + h * hd..j * w + (h + 1) * hd];
        for (o, x) in out.iter_mut().zip(vj) {
            *o = *o + p * *x;
        }
    }
}

/// Attention forward keeping the probability matrix for backward/export.
pub fn attention_forward<T: Scalar>(
    q: &[T],
    k: &[T],
    v: &[T],
    mask: &AttentionMask,
    layout: HeadLayout,
) -> Result<AttentionSaved<T>> {
    check_shapes(q, k, v, mask, layout)?;
    let (w, hd) = (layout.width(), layout.head_dim);
    let (tq, tk) = (mask.query_len(), mask.key_len());
    let scale = layout.scale::<T>();
    let mut out = vec![T::zero(); tq * w];
    let mut probs = vec![T::zero(); layout.heads * tq * tk];
    let mut scores = vec![T::zero(); tk];
    for i in 0..tq {
        let limit = mask.limit(i);
        for h in 0..layout.heads {
            let qi = &q[i * w + h * hd..i * w + (h + 1) * hd];
            let oi = &mut out[i * w + h * hd..i * w + (h + 1) * hd];
            attend_row(qi, k, v, limit, h, layout, scale, &mut scores, oi);
            let base = (h * tq + i) * tk;
            probs[base..base + limit].copy_from_slice(&scores[..limit]);
        }
    }
    Ok(AttentionSaved { probs, out })
}

/// Attention forward without retaining probabilities (decoding path).
pub fn attention_infer<T: Scalar>(
    q: &[T],
    k: &[T],
    v: &[T],
    mask: &AttentionMask,
    layout: HeadLayout,
) -> Result<Vec<T>> {
    check_shapes(q, k, v, mask, layout)?;
    let (w, hd) = (layout.width(), layout.head_dim);
    let scale = layout.scale::<T>();
    let mut out = vec![T::zero(); mask.query_len() * w];
    let mut scores = vec![T::zero(); mask.key_len()];
    for i in 0..mask.query_len() {
        for h in 0..layout.heads {
            let qi = &q[i * w + h * hd..i * w + (h + 1) * hd];
            let oi = &mut out[i * w + h * hd..i * w + (h + 1) * hd];
            attend_row(qi, k, v, mask.limit(i), h, layout, scale, &mut scores, oi);
        }
    }
    Ok(out)
}

/// Gradients of attention inputs.
#[derive(Clone, Debug)]
pub struct AttentionGrads<T> {
    pub dq: Vec<T>,
    pub dk: Vec<T>,
    pub dv: Vec<T>,
}

/// Backward of [`attention_forward`] from retained activations.
pub fn attention_backward<T: Scalar>(
    q: &[T],
    k: &[T],
    v: &[T],
    saved: &AttentionSaved<T>,
    d_out: &[T],
    mask: &AttentionMask,
    layout: HeadLayout,
) -> Result<AttentionGrads<T>> {
    check_shapes(q, k, v, mask, layout)?;
    if d_out.len() != saved.out.len() {
        return Err(ArpgError::Dimension("attention d_out shape".into()));
    }
    let (w, hd) = (layout.width(), layout.head_dim);
    let (tq, tk) = (mask.query_len(), mask.key_len());
    let scale = layout.scale::<T>();
    let mut dq = vec![T::zero(); q.len()];
    let mut dk = vec![T::zero(); k.len()];
    let mut dv = vec![T::zero(); v.len()];
    for h in 0..layout.heads {
        let head = h * hd..(h + 1) * hd;
        for i in 0..tq {
            let limit = mask.limit(i);
            let row = i * w;
            let do_i = &d_out[row + head.start..row + head.end];
            let o_i = &saved.out[row + head.start..row + head.end];
            let q_i = &q[row + head.start..row + head.end];
            let p_i = &saved.probs[(h * tq + i) * tk..(h * tq + i) * tk + limit];
            let do_dot_o = dot(do_i, o_i);
            for j in 0..limit {
                let kv = j * w;
                let v_j = &v[kv + head.start..kv + head.end];
                let dp = dot(do_i, v_j);
                let ds = p_i[j] * (dp - do_dot_o) * scale;
                let k_j = &k[kv + head.start..kv + head.end];
                for c in 0..hd {
                    dq[row + head.start + c] = dq[row + head.start + c] + ds * k_j[c];
                    dk[kv + head.start + c] = dk[kv + head.start + c] + ds * q_i[c];
                    dv[kv + head.start + c] = dv[kv + head.start + c] + p_i[j] * do_i[c];
                }
            }
        }
    }
    Ok(AttentionGrads { dq, dk, dv })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    #[test]
    fn identical_scores_average_values() {
        let layout = HeadLayout { heads: 1, head_dim: 2 };
        let q: Vec<f64> = vec![0.3, -0.2];
        let k = vec![1.0, 1.0, 1.0, 1.0];
        let v = vec![2.0, 4.0, 6.0, 0.0];
        let out = attention_infer(&q, &k, &v, &AttentionMask::full(1, 2), layout).unwrap();
        assert!((out[0] - 4.0).abs() < 1e-12 && (out[1] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn first_causal_row_copies_first_value() {
        let layout = HeadLayout { heads: 1, head_dim: 3 };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (q, k, v) = (rand_vec(&mut rng, 9), rand_vec(&mut rng, 9), rand_vec(&mut rng, 9));
        let out = attention_infer(&q, &k, &v, &AttentionMask::causal(3), layout).unwrap();
        assert_eq!(&out[..3], &v[..3]);
    }

    #[test]
    fn matches_brute_force_softmax() {
        let layout = HeadLayout { heads: 1, head_dim: 4 };
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (q, k, v) = (rand_vec(&mut rng, 12), rand_vec(&mut rng, 12), rand_vec(&mut rng, 12));
        let out = attention_infer(&q, &k, &v, &AttentionMask::full(3, 3), layout).unwrap();
        for i in 0..3 {
            let s: Vec<f64> = (0..3)
                .map(|j| (0..4).map(|c| q[i * 4 + c] * k[j * 4 + c]).sum::<f64>() / 2.0)
                .collect();
            let z: f64 = s.iter().map(|x| x.exp()).sum();
            for c in 0..4 {
                let expect: f64 = (0..3).map(|j| s[j].exp() / z * v[j * 4 + c]).sum();
                assert!((out[i * 4 + c] - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn empty_row_outputs_zero() {
        let layout = HeadLayout { heads: 1, head_dim: 2 };
        let out = attention_infer::<f64>(&[1.0, 1.0], &[], &[], &AttentionMask::full(1, 0), layout).unwrap();
        assert_eq!(out, vec![0.0, 0.0]);
    }

    #[test]
    fn zero_upstream_gives_zero_grads() {
        let layout = HeadLayout { heads: 2, head_dim: 2 };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (q, k, v) = (rand_vec(&mut rng, 12), rand_vec(&mut rng, 12), rand_vec(&mut rng, 12));
        let mask = AttentionMask::causal(3);
        let saved = attention_forward(&q, &k, &v, &mask, layout).unwrap();
        let g = attention_backward(&q, &k, &v, &saved, &vec![0.0; 12], &mask, layout).unwrap();
        assert!(g.dq.iter().chain(&g.dk).chain(&g.dv).all(|x| *x == 0.0));
    }

    #[test]
    fn causal_rows_ignore_later_inputs() {
        let layout = HeadLayout { heads: 2, head_dim: 4 };
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let t = 6;
        let (q, k, v) = (rand_vec(&mut rng, t * 8), rand_vec(&mut rng, t * 8), rand_vec(&mut rng, t * 8));
        let mask = AttentionMask::causal(t);
        let base = attention_infer(&q, &k, &v, &mask, layout).unwrap();
        for i in 0..t {
            let (mut k2, mut v2) = (k.clone(), v.clone());
            for x in k2[(i + 1) * 8..].iter_mut().chain(v2[(i + 1) * 8..].iter_mut()) {
                *x = rng.gen_range(-50.0..50.0);
            }
            let out = attention_infer(&q, &k2, &v2, &mask, layout).unwrap();
            assert_eq!(&out[..(i + 1) * 8], &base[..(i + 1) * 8]);
        }
    }
}
