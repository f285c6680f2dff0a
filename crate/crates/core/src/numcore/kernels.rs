//! Slice-level numeric kernels shared by the autograd tape and the
//! inference path.
//!
//! Every kernel computes each output row from the matching input row with a
//! fixed per-element operation order, so a row's result never depends on how
//! many other rows are processed alongside it. Incremental (KV-cached)
//! decoding relies on this to reproduce full recomputation bit for bit.

use super::Scalar;

const MR: usize = 6;
const NR: usize = 32;

/// `out[m×n] = a[m×k] · b[k×n]` (row-major, `out` overwritten).
pub fn matmul<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize, out: &mut [T]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    out.fill(T::zero());
    gemm_acc::<T, false>(a, b, m, k, n, out);
}

/// `out[m×n] += op(a) · b[k×n]` where `op(a)` is `a[m×k]`, or the
/// transpose of `a[k×m]` when `TA`. Each output sums its `k` products in
/// order before being added to `out`.
fn gemm_acc<T: Scalar, const TA: bool>(a: &[T], b: &[T], m: usize, k: usize, n: usize, out: &mut [T]) {
    let mut i = 0;
    while i + MR <= m {
        row_block::<T, MR, TA>(a, b, i, m, k, n, out);
        i += MR;
    }
    while i + 4 <= m {
        row_block::<T, 4, TA>(a, b, i, m, k, n, out);
        i += 4;
    }
    while i + 2 <= m {
        row_block::<T, 2, TA>(a, b, i, m, k, n, out);
        i += 2;
    }
    if i < m {
        row_block::<T, 1, TA>(a, b, i, m, k, n, out);
    }
}

#[inline(always)]
fn row_block<T: Scalar, const R: usize, const TA: bool>(
    a: &[T],
    b: &[T],
    i: usize,
    m: usize,
    k: usize,
    n: usize,
    out: &mut [T],
) {
    // Rows i..i+R of op(a), packed so that step p holds R contiguous values.
    let mut pack = vec![T::zero(); R * k];
    for (p, dst) in pack.chunks_exact_mut(R).enumerate() {
        for (r, x) in dst.iter_mut().enumerate() {
            *x = if TA { a[p * m + i + r] } else { a[(i + r) * k + p] };
        }
    }
    let mut j = 0;
    while j + NR <= n {
        let mut acc = [[T::zero(); NR]; R];
        for (bfull, av) in b.chunks_exact(n).zip(pack.chunks_exact(R)) {
            let brow: &[T; NR] = bfull[j..j + NR].try_into().unwrap();
            for r in 0..R {
                let x = av[r];
                let acc_r = &mut acc[r];
                for c in 0..NR {
                    acc_r[c] = acc_r[c] + x * brow[c];
                }
            }
        }
        for r in 0..R {
            add_assign(&mut out[(i + r) * n + j..(i + r) * n + j + NR], &acc[r]);
        }
        j += NR;
    }
    if j < n {
        let w = n - j;
        let mut acc = [[T::zero(); NR]; R];
        for (bfull, av) in b.chunks_exact(n).zip(pack.chunks_exact(R)) {
            let brow = &bfull[j..n];
            for r in 0..R {
                let x = av[r];
                for (y, &bv) in acc[r][..w].iter_mut().zip(brow) {
                    *y = *y + x * bv;
                }
            }
        }
        for r in 0..R {
            add_assign(&mut out[(i + r) * n + j..(i + r) * n + n], &acc[r][..w]);
        }
    }
}

/// Returns the `cols×rows` transpose of a row-major `rows×cols` matrix.
pub fn transpose<T: Scalar>(a: &[T], rows: usize, cols: usize) -> Vec<T> {
    const TILE: usize = 16;
    let mut out = vec![T::zero(); rows * cols];
    for r0 in (0..rows).step_by(TILE) {
        for c0 in (0..cols).step_by(TILE) {
            for r in r0..(r0 + TILE).min(rows) {
                for c in c0..(c0 + TILE).min(cols) {
                    out[c * rows + r] = a[r * cols + c];
                }
            }
        }
    }
    out
}

/// `acc += a[m×k] · b[n×k]ᵀ`, giving an `m×n` result.
pub fn matmul_bt_acc<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize, acc: &mut [T]) {
    debug_assert_eq!(acc.len(), m * n);
    let bt = transpose(b, n, k);
    gemm_acc::<T, false>(a, &bt, m, k, n, acc);
}

/// `acc += a[m×k]ᵀ · b[m×n]`, giving a `k×n` result.
pub fn matmul_at_acc<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize, acc: &mut [T]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    debug_assert_eq!(acc.len(), k * n);
    gemm_acc::<T, true>(a, b, k, m, n, acc);
}

pub fn add_assign<T: Scalar>(acc: &mut [T], x: &[T]) {
    debug_assert_eq!(acc.len(), x.len());
    for (a, v) in acc.iter_mut().zip(x) {
        *a = *a + *v;
    }
}

pub fn add<T: Scalar>(a: &[T], b: &[T]) -> Vec<T> {
    a.iter().zip(b).map(|(x, y)| *x + *y).collect()
}

#[inline]
pub fn sigmoid<T: Scalar>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

#[inline]
pub fn silu<T: Scalar>(x: T) -> T {
    x * sigmoid(x)
}

/// Derivative of `silu` at `x`.
#[inline]
pub fn silu_grad<T: Scalar>(x: T) -> T {
    let s = sigmoid(x);
    s * (T::one() + x * (T::one() - s))
}

/// Gated feed-forward activation `silu(gate) ⊙ up`.
pub fn swiglu<T: Scalar>(gate: &[T], up: &[T]) -> Vec<T> {
    gate.iter().zip(up).map(|(g, u)| silu(*g) * *u).collect()
}

/// RMS normalization over rows of width `cols`. Returns the output and the
/// per-row inverse RMS needed by the backward pass.
pub fn rms_norm<T: Scalar>(x: &[T], gain: &[T], cols: usize, eps: T) -> (Vec<T>, Vec<T>) {
    let rows = x.len() / cols;
    let n = T::from_usize(cols).unwrap();
    let mut out = vec![T::zero(); x.len()];
    let mut inv = Vec::with_capacity(rows);
    for r in 0..rows {
        let xr = &x[r * cols..(r + 1) * cols];
        let ms = xr.iter().fold(T::zero(), |s, v| s + *v * *v) / n;
        let ir = T::one() / (ms + eps).sqrt();
        inv.push(ir);
        for (o, (v, g)) in out[r * cols..(r + 1) * cols].iter_mut().zip(xr.iter().zip(gain)) {
            *o = *v * ir * *g;
        }
    }
    (out, inv)
}

/// Backward of [`rms_norm`]: returns `dx` and accumulates into `dgain`.
pub fn rms_norm_backward<T: Scalar>(
    x: &[T],
    gain: &[T],
    inv_rms: &[T],
    dy: &[T],
    cols: usize,
    dgain: Option<&mut [T]>,
) -> Vec<T> {
    let rows = x.len() / cols;
    let n = T::from_usize(cols).unwrap();
    let mut dx = vec![T::zero(); x.len()];
    let mut dg_acc = vec![T::zero(); cols];
    for r in 0..rows {
        let ir = inv_rms[r];
        let xr = &x[r * cols..(r + 1) * cols];
        let dyr = &dy[r * cols..(r + 1) * cols];
        let mut dot = T::zero();
        for c in 0..cols {
            let xhat = xr[c] * ir;
            dg_acc[c] = dg_acc[c] + dyr[c] * xhat;
            dot = dot + dyr[c] * gain[c] * xhat;
        }
        let mean = dot / n;
        for c in 0..cols {
            let xhat = xr[c] * ir;
            dx[r * cols + c] = ir * (dyr[c] * gain[c] - xhat * mean);
        }
    }
    if let Some(dg) = dgain {
        add_assign(dg, &dg_acc);
    }
    dx
}

/// Numerically stable softmax over each row of width `cols`.
pub fn softmax_rows<T: Scalar>(x: &[T], cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for (xr, yr) in x.chunks(cols).zip(out.chunks_mut(cols)) {
        softmax_into(xr, yr);
    }
    out
}

pub fn softmax_into<T: Scalar>(x: &[T], y: &mut [T]) {
    let max = x.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi = (*xi - max).exp();
        sum = sum + *yi;
    }
    for yi in y.iter_mut() {
        *yi = *yi / sum;
    }
}

/// Softmax Jacobian-vector product per row: `dx = y ⊙ (dy − ⟨dy, y⟩)`,
/// i.e. `dy · (diag(y) − yᵀy)`.
pub fn softmax_rows_backward<T: Scalar>(y: &[T], dy: &[T], cols: usize) -> Vec<T> {
    let mut dx = vec![T::zero(); y.len()];
    for ((yr, dyr), dxr) in y.chunks(cols).zip(dy.chunks(cols)).zip(dx.chunks_mut(cols)) {
        let dot = yr.iter().zip(dyr).fold(T::zero(), |s, (a, b)| s + *a * *b);
        for c in 0..cols {
            dxr[c] = yr[c] * (dyr[c] - dot);
        }
    }
    dx
}

/// Mean negative log-likelihood of `targets` under row-wise softmax of
/// `logits[n×v]`. Also returns the probabilities for the backward pass.
pub fn cross_entropy<T: Scalar>(logits: &[T], targets: &[usize], v: usize) -> (T, Vec<T>) {
    let probs = softmax_rows(logits, v);
    if targets.is_empty() {
        return (T::zero(), probs);
    }
    let mut total = T::zero();
    for (r, &t) in targets.iter().enumerate() {
        let row = &logits[r * v..(r + 1) * v];
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let lse = row.iter().fold(T::zero(), |s, x| s + (*x - max).exp()).ln() + max;
        total = total + (lse - row[t]);
    }
    (total / T::from_usize(targets.len()).unwrap(), probs)
}

/// Index of the largest element; the first one wins ties.
pub fn argmax<T: Scalar>(x: &[T]) -> usize {
    let mut best = 0;
    for (i, v) in x.iter().enumerate() {
        if *v > x[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut s = 0.0;
                for p in 0..k {
                    s += a[i * k + p] * b[p * n + j];
                }
                out[i * n + j] = s;
            }
        }
        out
    }

    #[test]
    fn matmul_matches_naive_on_ragged_shapes() {
        for &(m, k, n) in &[(1, 1, 1), (3, 5, 7), (9, 4, 33), (4, 16, 16), (13, 7, 40)] {
            let a: Vec<f64> = (0..m * k).map(|i| ((i * 7 % 11) as f64) - 5.0).collect();
            let b: Vec<f64> = (0..k * n).map(|i| ((i * 5 % 13) as f64) * 0.25).collect();
            let mut out = vec![0.0; m * n];
            matmul(&a, &b, m, k, n, &mut out);
            assert_eq!(out, naive(&a, &b, m, k, n));
        }
    }

    #[test]
    fn matmul_rows_are_independent_of_batch() {
        let (m, k, n) = (11, 19, 37);
        let a: Vec<f32> = (0..m * k).map(|i| (i as f32 * 0.37).sin()).collect();
        let b: Vec<f32> = (0..k * n).map(|i| (i as f32 * 0.11).cos()).collect();
        let mut full = vec![0.0; m * n];
        matmul(&a, &b, m, k, n, &mut full);
        for i in 0..m {
            let mut single = vec![0.0; n];
            matmul(&a[i * k..(i + 1) * k], &b, 1, k, n, &mut single);
            assert_eq!(&full[i * n..(i + 1) * n], &single[..]);
        }
    }

    #[test]
    fn transposed_products() {
        let (m, k, n) = (3, 4, 5);
        let a: Vec<f64> = (0..m * k).map(|i| i as f64 * 0.5 - 2.0).collect();
        let b: Vec<f64> = (0..n * k).map(|i| (i % 7) as f64 - 3.0).collect();
        let mut acc = vec![0.0; m * n];
        matmul_bt_acc(&a, &b, m, k, n, &mut acc);
        let bt = transpose(&b, n, k);
        assert_eq!(acc, naive(&a, &bt, m, k, n));

        let c: Vec<f64> = (0..m * n).map(|i| (i % 4) as f64).collect();
        let mut acc2 = vec![0.0; k * n];
        matmul_at_acc(&a, &c, m, k, n, &mut acc2);
        let at = transpose(&a, m, k);
        assert_eq!(acc2, naive(&at, &c, k, m, n));
    }

    #[test]
    fn argmax_prefers_first_tie() {
        assert_eq!(argmax(&[1.0f32, 3.0, 3.0, 2.0]), 1);
    }
}
