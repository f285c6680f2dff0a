//! Reverse-mode differentiation over a linear tape.
//!
//! Operations append nodes holding their forward value; `backward` walks the
//! tape in reverse and accumulates gradients into every node that requires
//! one. Parameters are borrowed, never copied, so a tape lives no longer than
//! the model it reads from.

use super::{kernels, Parameter, Scalar, Tensor};
use crate::attention::{
    attention_backward, attention_forward, AttentionMask, AttentionSaved, HeadLayout, RopeTable,
};
use crate::error::{ArpgError, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Value<'a, T> {
    Owned(Tensor<T>),
    Borrowed(&'a Tensor<T>),
}

impl<T> Value<'_, T> {
    fn get(&self) -> &Tensor<T> {
        match self {
            Value::Owned(t) => t,
            Value::Borrowed(t) => t,
        }
    }
}

enum Op<'a, T> {
    Leaf,
    Param,
    MatMul(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddConst(Var),
    Silu(Var),
    Transpose(Var),
    Softmax(Var),
    Sum(Var),
    SliceCols { x: Var, start: usize },
    Dropout { x: Var, keep: Vec<T> },
    Embedding { table: Var, ids: Vec<usize> },
    RmsNorm { x: Var, gain: Var, inv_rms: Vec<T> },
    Rope { x: Var, positions: Vec<usize>, heads: usize, table: &'a RopeTable<T> },
    Attention { q: Var, k: Var, v: Var, mask: AttentionMask, layout: HeadLayout, saved: AttentionSaved<T> },
    CrossEntropy { logits: Var, targets: Vec<usize>, probs: Vec<T> },
}

struct Node<'a, T> {
    value: Value<'a, T>,
    op: Op<'a, T>,
    requires_grad: bool,
    grad: Option<Vec<T>>,
}

/// Recorded computation graph.
pub struct Tape<'a, T> {
    nodes: Vec<Node<'a, T>>,
    params: Vec<Option<Var>>,
}

impl<T: Scalar> Default for Tape<'_, T> {
    fn default() -> Self {
        Self::new()
    }
}

fn dim_err(what: &str, a: &[usize], b: &[usize]) -> ArpgError {
    ArpgError::Dimension(format!("{what}: {a:?} vs {b:?}"))
}

impl<'a, T: Scalar> Tape<'a, T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            params: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<'a, T>, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.push_node(Value::Owned(value), op, requires_grad)
    }

    fn push_node(&mut self, value: Value<'a, T>, op: Op<'a, T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Constant or differentiable input.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push_node(Value::Owned(value), Op::Leaf, requires_grad)
    }

    /// Registers parameter `index` (once; later calls return the same node).
    pub fn param(&mut self, index: usize, param: &'a Parameter<T>) -> Var {
        if self.params.len() <= index {
            self.params.resize(index + 1, None);
        }
        if let Some(v) = self.params[index] {
            return v;
        }
        let v = self.push_node(Value::Borrowed(&param.value), Op::Param, true);
        self.params[index] = Some(v);
        v
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        self.nodes[v.0].value.get()
    }

    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].grad.as_deref()
    }

    /// `[m×k] · [k×n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (sa, sb) = (ta.shape(), tb.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(dim_err("matmul inner dimensions", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * n];
        kernels::matmul(ta.data(), tb.data(), m, k, n, &mut out);
        let value = Tensor::from_rows(m, n, out)?;
        Ok(self.push(value, Op::MatMul(a, b), &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(dim_err("add", ta.shape(), tb.shape()));
        }
        let value = Tensor::new(ta.shape().to_vec(), kernels::add(ta.data(), tb.data()))?;
        Ok(self.push(value, Op::Add(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(dim_err("mul", ta.shape(), tb.shape()));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| *x * *y).collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.push(value, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, x: Var, s: T) -> Var {
        let t = self.value(x);
        let value = Tensor::new(t.shape().to_vec(), t.data().iter().map(|v| *v * s).collect())
            .expect("same shape");
        self.push(value, Op::Scale(x, s), &[x])
    }

    /// Adds a constant tensor (e.g. an additive mask); gradient passes through.
    pub fn add_const(&mut self, x: Var, c: &Tensor<T>) -> Result<Var> {
        let t = self.value(x);
        if t.shape() != c.shape() {
            return Err(dim_err("add_const", t.shape(), c.shape()));
        }
        let value = Tensor::new(t.shape().to_vec(), kernels::add(t.data(), c.data()))?;
        Ok(self.push(value, Op::AddConst(x), &[x]))
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let data = t.data().iter().map(|v| kernels::silu(*v)).collect();
        let value = Tensor::new(t.shape().to_vec(), data).expect("same shape");
        self.push(value, Op::Silu(x), &[x])
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if t.shape().len() != 2 {
            return Err(ArpgError::Dimension(format!("transpose of rank-{} tensor", t.shape().len())));
        }
        let (r, c) = (t.shape()[0], t.shape()[1]);
        let value = Tensor::from_rows(c, r, kernels::transpose(t.data(), r, c))?;
        Ok(self.push(value, Op::Transpose(x), &[x]))
    }

    /// Softmax along the last axis.
    pub fn softmax(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let value = Tensor::new(t.shape().to_vec(), kernels::softmax_rows(t.data(), t.cols()))
            .expect("same shape");
        self.push(value, Op::Softmax(x), &[x])
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().copied().fold(T::zero(), |a, b| a + b);
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    /// Columns `start..end` of a matrix.
    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let t = self.value(x);
        let cols = t.cols();
        if start > end || end > cols {
            return Err(ArpgError::Index(format!("column slice {start}..{end} of width {cols}")));
        }
        let mut data = Vec::with_capacity(t.rows() * (end - start));
        for r in 0..t.rows() {
            data.extend_from_slice(&t.row(r)[start..end]);
        }
        let value = Tensor::from_rows(t.rows(), end - start, data)?;
        Ok(self.push(value, Op::SliceCols { x, start }, &[x]))
    }

    /// Multiplies by a precomputed keep mask (entries 0 or 1/(1−p)).
    pub fn dropout(&mut self, x: Var, keep: Vec<T>) -> Result<Var> {
        let t = self.value(x);
        if keep.len() != t.numel() {
            return Err(ArpgError::Dimension("dropout mask length".into()));
        }
        let data = t.data().iter().zip(&keep).map(|(a, b)| *a * *b).collect();
        let value = Tensor::new(t.shape().to_vec(), data)?;
        Ok(self.push(value, Op::Dropout { x, keep }, &[x]))
    }

    /// Gathers rows `ids` of a `[rows × d]` table.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let t = self.value(table);
        let (rows, d) = (t.rows(), t.cols());
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= rows {
                return Err(ArpgError::Index(format!("embedding id {id} of {rows}")));
            }
            data.extend_from_slice(t.row(id));
        }
        let value = Tensor::from_rows(ids.len(), d, data)?;
        Ok(self.push(value, Op::Embedding { table, ids: ids.to_vec() }, &[table]))
    }

    pub fn rms_norm(&mut self, x: Var, gain: Var, eps: T) -> Result<Var> {
        let (tx, tg) = (self.value(x), self.value(gain));
        if tg.numel() != tx.cols() {
            return Err(dim_err("rms_norm gain", tx.shape(), tg.shape()));
        }
        let (out, inv_rms) = kernels::rms_norm(tx.data(), tg.data(), tx.cols(), eps);
        let value = Tensor::new(tx.shape().to_vec(), out)?;
        Ok(self.push(value, Op::RmsNorm { x, gain, inv_rms }, &[x, gain]))
    }

    pub fn rope(
        &mut self,
        x: Var,
        positions: &[usize],
        heads: usize,
        table: &'a RopeTable<T>,
    ) -> Result<Var> {
        let t = self.value(x);
        let out = table.apply(t.data(), positions, heads, false)?;
        let value = Tensor::new(t.shape().to_vec(), out)?;
        Ok(self.push(
            value,
            Op::Rope { x, positions: positions.to_vec(), heads, table },
            &[x],
        ))
    }

    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        mask: &AttentionMask,
        layout: HeadLayout,
    ) -> Result<Var> {
        let saved = attention_forward(
            self.value(q).data(),
            self.value(k).data(),
            self.value(v).data(),
            mask,
            layout,
        )?;
        let value = Tensor::from_rows(mask.query_len(), layout.width(), saved.out.clone())?;
        Ok(self.push(
            value,
            Op::Attention { q, k, v, mask: mask.clone(), layout, saved },
            &[q, k, v],
        ))
    }

    /// Final-layer attention probabilities `[heads × q × k]` of an attention node.
    pub fn attention_probs(&self, v: Var) -> Option<&[T]> {
        match &self.nodes[v.0].op {
            Op::Attention { saved, .. } => Some(&saved.probs),
            _ => None,
        }
    }

    /// Mean cross-entropy of `targets` under `logits[n×v]`. An empty target
    /// list yields a zero loss with zero gradient.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let t = self.value(logits);
        let v = t.cols();
        if t.rows() != targets.len() {
            return Err(ArpgError::Dimension(format!(
                "{} logit rows for {} targets",
                t.rows(),
                targets.len()
            )));
        }
        if let Some(bad) = targets.iter().find(|&&x| x >= v) {
            return Err(ArpgError::Index(format!("target {bad} outside vocabulary of {v}")));
        }
        let (loss, probs) = kernels::cross_entropy(t.data(), targets, v);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy { logits, targets: targets.to_vec(), probs },
            &[logits],
        ))
    }

    /// Clears all accumulated gradients.
    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    fn accumulate(&mut self, v: Var, g: &[T]) {
        let node = &mut self.nodes[v.0];
        if !node.requires_grad {
            return;
        }
        match &mut node.grad {
            Some(acc) => kernels::add_assign(acc, g),
            None => node.grad = Some(g.to_vec()),
        }
    }

    /// Reverse-mode accumulation from a scalar `loss`. Gradients add onto
    /// any left by an earlier call; every node requiring a gradient ends up
    /// with one (zeros when unreachable).
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(ArpgError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        // Upstream grads for this pass live apart from accumulated ones.
        let mut upstream: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        upstream[loss.0] = Some(vec![T::one()]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = upstream[idx].take() else { continue };
            if !self.nodes[idx].requires_grad {
                continue;
            }
            for (input, dx) in self.local_grads(idx, &g)? {
                match &mut upstream[input.0] {
                    Some(acc) => kernels::add_assign(acc, &dx),
                    slot => *slot = Some(dx),
                }
            }
            self.accumulate(Var(idx), &g);
        }
        for n in &mut self.nodes {
            if n.requires_grad && n.grad.is_none() {
                n.grad = Some(vec![T::zero(); n.value.get().numel()]);
            }
        }
        Ok(())
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn local_grads(&self, idx: usize, g: &[T]) -> Result<Vec<(Var, Vec<T>)>> {
        let node = &self.nodes[idx];
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                if self.needs(*a) {
                    let mut da = vec![T::zero(); m * k];
                    kernels::matmul_bt_acc(g, tb.data(), m, n, k, &mut da);
                    out.push((*a, da));
                }
                if self.needs(*b) {
                    let mut db = vec![T::zero(); k * n];
                    kernels::matmul_at_acc(ta.data(), g, m, k, n, &mut db);
                    out.push((*b, db));
                }
            }
            Op::Add(a, b) => {
                out.push((*a, g.to_vec()));
                out.push((*b, g.to_vec()));
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a).data(), self.value(*b).data());
                out.push((*a, g.iter().zip(tb).map(|(x, y)| *x * *y).collect()));
                out.push((*b, g.iter().zip(ta).map(|(x, y)| *x * *y).collect()));
            }
            Op::Scale(x, s) => out.push((*x, g.iter().map(|v| *v * *s).collect())),
            Op::AddConst(x) => out.push((*x, g.to_vec())),
            Op::Silu(x) => {
                let tx = self.value(*x).data();
                out.push((*x, g.iter().zip(tx).map(|(d, v)| *d * kernels::silu_grad(*v)).collect()));
            }
            Op::Transpose(x) => {
                let s = self.value(*x).shape();
                out.push((*x, kernels::transpose(g, s[1], s[0])));
            }
            Op::Softmax(x) => {
                let y = node.value.get();
                out.push((*x, kernels::softmax_rows_backward(y.data(), g, y.cols())));
            }
            Op::Sum(x) => out.push((*x, vec![g[0]; self.value(*x).numel()])),
            Op::SliceCols { x, start } => {
                let tx = self.value(*x);
                let (cols, w) = (tx.cols(), node.value.get().cols());
                let mut dx = vec![T::zero(); tx.numel()];
                for r in 0..tx.rows() {
                    dx[r * cols + start..r * cols + start + w].copy_from_slice(&g[r * w..(r + 1) * w]);
                }
                out.push((*x, dx));
            }
            Op::Dropout { x, keep } => {
                out.push((*x, g.iter().zip(keep).map(|(a, b)| *a * *b).collect()));
            }
            Op::Embedding { table, ids } => {
                let t = self.value(*table);
                let d = t.cols();
                let mut dt = vec![T::zero(); t.numel()];
                for (r, &id) in ids.iter().enumerate() {
                    kernels::add_assign(&mut dt[id * d..(id + 1) * d], &g[r * d..(r + 1) * d]);
                }
                out.push((*table, dt));
            }
            Op::RmsNorm { x, gain, inv_rms } => {
                let (tx, tg) = (self.value(*x), self.value(*gain));
                let mut dg = vec![T::zero(); tg.numel()];
                let dx = kernels::rms_norm_backward(tx.data(), tg.data(), inv_rms, g, tx.cols(), Some(&mut dg));
                out.push((*x, dx));
                out.push((*gain, dg));
            }
            Op::Rope { x, positions, heads, table } => {
                out.push((*x, table.apply(g, positions, *heads, true)?));
            }
            Op::Attention { q, k, v, mask, layout, saved } => {
                let grads = attention_backward(
                    self.value(*q).data(),
                    self.value(*k).data(),
                    self.value(*v).data(),
                    saved,
                    g,
                    mask,
                    *layout,
                )?;
                out.push((*q, grads.dq));
                out.push((*k, grads.dk));
                out.push((*v, grads.dv));
            }
            Op::CrossEntropy { logits, targets, probs } => {
                let v = self.value(*logits).cols();
                let mut dl = vec![T::zero(); probs.len()];
                if !targets.is_empty() {
                    let scale = g[0] / T::from_usize(targets.len()).unwrap();
                    for (r, &t) in targets.iter().enumerate() {
                        for c in 0..v {
                            let onehot = if c == t { T::one() } else { T::zero() };
                            dl[r * v + c] = (probs[r * v + c] - onehot) * scale;
                        }
                    }
                }
                out.push((*logits, dl));
            }
        }
        Ok(out)
    }

    /// Gradient of every registered parameter, by parameter index.
    pub fn param_grads(&self) -> impl Iterator<Item = (usize, &[T])> + '_ {
        self.params.iter().enumerate().filter_map(move |(i, v)| {
            v.and_then(|v| self.grad(v)).map(|g| (i, g))
        })
    }

    /// Adds parameter gradients into a flat per-parameter accumulator.
    pub fn accumulate_param_grads(&self, acc: &mut [Vec<T>]) {
        for (i, g) in self.param_grads() {
            kernels::add_assign(&mut acc[i], g);
        }
    }
}

/// Evaluates a closure's gradient into `params[..].grad` (convenience for
/// single-graph use; accumulates like [`Tape::backward`]).
pub fn backward_into_params<T: Scalar>(
    params: &mut [Parameter<T>],
    build: impl for<'p> FnOnce(&mut Tape<'p, T>, &'p [Parameter<T>]) -> Result<Var>,
) -> Result<T> {
    let mut acc: Vec<Vec<T>> = params.iter().map(|p| vec![T::zero(); p.numel()]).collect();
    let loss = {
        let mut tape = Tape::new();
        let loss = build(&mut tape, params)?;
        tape.backward(loss)?;
        tape.accumulate_param_grads(&mut acc);
        tape.value(loss).item()?
    };
    for (p, g) in params.iter_mut().zip(&acc) {
        kernels::add_assign(&mut p.grad, g);
    }
    Ok(loss)
}
