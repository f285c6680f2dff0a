//! Coupled masked-modeling baseline: content and [MASK] rows share one
//! bidirectional self-attention stack and the loss covers [MASK] rows only.
//! Queries of unmasked rows in the last layer then receive exactly zero
//! gradient, in contrast to the two-pass decoder where every query slot is
//! supervised.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{AttentionMask, HeadLayout};
use crate::error::Result;
use crate::model::{forward_train, ArpgModel, ModelConfig};
use crate::numcore::{Parameter, Tape, Tensor, Var};
use crate::ordering::sample_permutation;

/// Per-layer, per-row gradient norms of the baseline.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradDemoReport {
    pub seed: u64,
    pub masked: Vec<bool>,
    pub loss: f64,
    /// `dq_norms[layer][row]`.
    pub dq_norms: Vec<Vec<f64>>,
    pub dk_norms: Vec<Vec<f64>>,
    pub dv_norms: Vec<Vec<f64>>,
}

impl GradDemoReport {
    /// Every unmasked row of the final layer has `‖dq‖ = 0` exactly and,
    /// when the loss is non-empty, every masked row has `‖dq‖ > 0`.
    pub fn sparsity_holds(&self) -> bool {
        let last = self.dq_norms.last().expect("at least one layer");
        self.masked
            .iter()
            .zip(last)
            .all(|(&m, &n)| if m { n > 0.0 } else { n == 0.0 })
    }
}

/// Shape of the baseline network.
#[derive(Clone, Copy, Debug)]
pub struct BaselineShape {
    pub vocab: usize,
    pub hidden: usize,
    pub heads: usize,
    pub layers: usize,
}

impl Default for BaselineShape {
    fn default() -> Self {
        BaselineShape {
            vocab: 16,
            hidden: 16,
            heads: 2,
            layers: 2,
        }
    }
}

fn row_norms(grad: Option<&[f64]>, rows: usize, width: usize) -> Vec<f64> {
    match grad {
        Some(g) => (0..rows)
            .map(|r| g[r * width..(r + 1) * width].iter().map(|x| x * x).sum::<f64>().sqrt())
            .collect(),
        None => vec![0.0; rows],
    }
}

/// Runs the baseline with random content and weights drawn from `seed`,
/// loss on rows where `masked` is true.
pub fn masked_baseline_grad_demo_with(seed: u64, masked: &[bool], shape: BaselineShape) -> Result<GradDemoReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (v, d) = (shape.vocab, shape.hidden);
    let rows = masked.len();
    let mut rand_param = |name: String, r: usize, c: usize, std: f64| {
        let data = (0..r * c).map(|_| rng.gen_range(-1.0..1.0) * std).collect();
        Parameter::new(name, Tensor::from_rows(r, c, data).expect("shape"))
    };
    let w_std = 1.0 / (d as f64).sqrt();
    let mut params = vec![rand_param("embedding".into(), v + 1, d, 1.0)];
    for l in 0..shape.layers {
        for w in ["wq", "wk", "wv", "wo"] {
            params.push(rand_param(format!("layer{l}.{w}"), d, d, w_std));
        }
    }
    params.push(rand_param("head".into(), d, v, w_std));
    let content: Vec<usize> = (0..rows).map(|_| rng.gen_range(0..v)).collect();
    let ids: Vec<usize> = content
        .iter()
        .zip(masked)
        .map(|(&t, &m)| if m { v } else { t })
        .collect();
    let layout = HeadLayout {
        heads: shape.heads,
        head_dim: d / shape.heads,
    };

    let mut tape = Tape::new();
    let table = tape.param(0, &params[0]);
    let mut x = tape.embedding(table, &ids)?;
    let mask = AttentionMask::full(rows, rows);
    let mut qkv: Vec<(Var, Var, Var)> = Vec::with_capacity(shape.layers);
    for l in 0..shape.layers {
        let base = 1 + 4 * l;
        let w: Vec<Var> = (0..4).map(|i| tape.param(base + i, &params[base + i])).collect();
        let q = tape.matmul(x, w[0])?;
        let k = tape.matmul(x, w[1])?;
        let vv = tape.matmul(x, w[2])?;
        let a = tape.attention(q, k, vv, &mask, layout)?;
        let o = tape.matmul(a, w[3])?;
        x = tape.add(x, o)?;
        qkv.push((q, k, vv));
    }
    let head_index = params.len() - 1;
    let head = tape.param(head_index, &params[head_index]);
    let logits = tape.matmul(x, head)?;
    let masked_rows: Vec<usize> = (0..rows).filter(|&r| masked[r]).collect();
    let picked = tape.embedding(logits, &masked_rows)?;
    let targets: Vec<usize> = masked_rows.iter().map(|&r| content[r]).collect();
    let loss = tape.cross_entropy(picked, &targets)?;
    tape.backward(loss)?;

    let norms = |sel: fn(&(Var, Var, Var)) -> Var| -> Vec<Vec<f64>> {
        qkv.iter().map(|t| row_norms(tape.grad(sel(t)), rows, d)).collect()
    };
    Ok(GradDemoReport {
        seed,
        masked: masked.to_vec(),
        loss: tape.value(loss).item()?,
        dq_norms: norms(|t| t.0),
        dk_norms: norms(|t| t.1),
        dv_norms: norms(|t| t.2),
    })
}

/// Default 8-row demonstration: rows 1, 2, 5 and 6 are masked.
pub fn masked_baseline_grad_demo(seed: u64) -> Result<GradDemoReport> {
    let masked = [false, true, true, false, false, true, true, false];
    masked_baseline_grad_demo_with(seed, &masked, BaselineShape::default())
}

/// Gradient reach of one two-pass training step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContrastReport {
    pub seed: u64,
    pub loss: f64,
    /// Gradient norm of every Pass-2 `wq`.
    pub wq_grad_norms: Vec<f64>,
    /// Per-row `dq` norms of the final Pass-2 layer.
    pub dq_norms: Vec<f64>,
}

impl ContrastReport {
    pub fn wq_nonzero(&self) -> bool {
        self.wq_grad_norms.iter().all(|&n| n > 0.0)
    }
}

/// One teacher-forced step of a small two-pass model (double precision,
/// random weights, grid and order from `seed`).
pub fn arpg_grad_contrast(seed: u64) -> Result<ContrastReport> {
    let config = ModelConfig {
        vocab_size: 16,
        num_classes: 4,
        hidden: 16,
        heads: 2,
        pass1_layers: 1,
        pass2_layers: 2,
        grid_height: 2,
        grid_width: 4,
        ..ModelConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let model = ArpgModel::<f64>::init(&config, &mut rng)?;
    let t = config.seq_len();
    let tokens: Vec<usize> = (0..t).map(|_| rng.gen_range(0..config.vocab_size)).collect();
    let order = sample_permutation(t, &mut rng);
    let mut tape = Tape::new();
    let out = forward_train(&mut tape, &model, &tokens, config.class_token(0), &order, None)?;
    tape.backward(out.loss)?;
    let grads: Vec<(usize, &[f64])> = tape.param_grads().collect();
    let wq_grad_norms = model
        .layout()
        .pass2
        .iter()
        .map(|layer| {
            grads
                .iter()
                .filter(|(i, _)| *i == layer.wq)
                .flat_map(|(_, g)| g.iter())
                .map(|x| x * x)
                .sum::<f64>()
                .sqrt()
        })
        .collect();
    let last_q = *out.pass2.queries.last().expect("at least one Pass-2 layer");
    Ok(ContrastReport {
        seed,
        loss: tape.value(out.loss).item()?,
        wq_grad_norms,
        dq_norms: row_norms(tape.grad(last_q), t, config.hidden),
    })
}
