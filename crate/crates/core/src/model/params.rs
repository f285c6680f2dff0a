use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::ModelConfig;
use crate::attention::{HeadLayout, RopeTable};
use crate::error::{ArpgError, Result};
use crate::numcore::{Parameter, Scalar, Tensor};

const INIT_STD: f64 = 0.02;

/// Indices of one Pass-1 (causal self-attention) layer's parameters.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Pass1Layer {
    pub attn_norm: usize,
    pub wq: usize,
    pub wk: usize,
    pub wv: usize,
    pub wo: usize,
    pub ffn_norm: usize,
    pub w_gate: usize,
    pub w_up: usize,
    pub w_down: usize,
}

/// Indices of one Pass-2 (cross-attention) layer's parameters. `wk`/`wv`
/// exist only without the shared projection.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Pass2Layer {
    pub attn_norm: usize,
    pub wq: usize,
    pub kv: Option<(usize, usize)>,
    pub wo: usize,
    pub ffn_norm: usize,
    pub w_gate: usize,
    pub w_up: usize,
    pub w_down: usize,
}

/// Where each named weight lives in [`ArpgModel::params`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamLayout {
    pub embedding: usize,
    pub pass1: Vec<Pass1Layer>,
    pub kv_norm: usize,
    /// Shared `d → 2d` key/value projection.
    pub kv_proj: Option<usize>,
    pub pass2: Vec<Pass2Layer>,
    pub final_norm: usize,
    pub head: usize,
}

/// Parameter shapes in declaration order; the single source for both
/// initialization and checkpoint validation.
pub fn parameter_specs(config: &ModelConfig) -> (ParamLayout, Vec<(String, Vec<usize>)>) {
    let d = config.hidden;
    let f = config.ffn_hidden();
    let mut specs: Vec<(String, Vec<usize>)> = Vec::new();
    let mut push = |name: String, shape: Vec<usize>| {
        specs.push((name, shape));
        specs.len() - 1
    };
    let embedding = push("embedding".into(), vec![config.embedding_rows(), d]);
    let mut pass1 = Vec::with_capacity(config.pass1_layers);
    for l in 0..config.pass1_layers {
        let p = format!("pass1.layer{l}");
        pass1.push(Pass1Layer {
            attn_norm: push(format!("{p}.attn_norm"), vec![d]),
            wq: push(format!("{p}.wq"), vec![d, d]),
            wk: push(format!("{p}.wk"), vec![d, d]),
            wv: push(format!("{p}.wv"), vec![d, d]),
            wo: push(format!("{p}.wo"), vec![d, d]),
            ffn_norm: push(format!("{p}.ffn_norm"), vec![d]),
            w_gate: push(format!("{p}.w_gate"), vec![d, f]),
            w_up: push(format!("{p}.w_up"), vec![d, f]),
            w_down: push(format!("{p}.w_down"), vec![f, d]),
        });
    }
    let kv_norm = push("kv_norm".into(), vec![d]);
    let kv_proj = config.shared_kv.then(|| push("kv_proj".into(), vec![d, 2 * d]));
    let mut pass2 = Vec::with_capacity(config.pass2_layers);
    for l in 0..config.pass2_layers {
        let p = format!("pass2.layer{l}");
        let attn_norm = push(format!("{p}.attn_norm"), vec![d]);
        let wq = push(format!("{p}.wq"), vec![d, d]);
        let kv = (!config.shared_kv).then(|| {
            (push(format!("{p}.wk"), vec![d, d]), push(format!("{p}.wv"), vec![d, d]))
        });
        pass2.push(Pass2Layer {
            attn_norm,
            wq,
            kv,
            wo: push(format!("{p}.wo"), vec![d, d]),
            ffn_norm: push(format!("{p}.ffn_norm"), vec![d]),
            w_gate: push(format!("{p}.w_gate"), vec![d, f]),
            w_up: push(format!("{p}.w_up"), vec![d, f]),
            w_down: push(format!("{p}.w_down"), vec![f, d]),
        });
    }
    let final_norm = push("final_norm".into(), vec![d]);
    let head = push("head".into(), vec![d, config.vocab_size]);
    let layout = ParamLayout {
        embedding,
        pass1,
        kv_norm,
        kv_proj,
        pass2,
        final_norm,
        head,
    };
    (layout, specs)
}

/// Whether AdamW weight decay applies to the named parameter (norm gains
/// and the embedding table are exempt).
pub fn decays(name: &str) -> bool {
    !(name.ends_with("norm") || name == "embedding")
}

/// Two-pass decoder: configuration, named parameters and rotary table.
#[derive(Clone, Debug)]
pub struct ArpgModel<T> {
    config: ModelConfig,
    layout: ParamLayout,
    params: Vec<Parameter<T>>,
    rope: RopeTable<T>,
}

impl<T: Scalar> ArpgModel<T> {
    /// Truncated-normal (±2σ, σ=0.02) weights, unit norm gains.
    pub fn init<R: Rng + ?Sized>(config: &ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let (layout, specs) = parameter_specs(config);
        let normal = Normal::new(0.0, INIT_STD).expect("valid std");
        let params = specs
            .into_iter()
            .map(|(name, shape)| {
                let n: usize = shape.iter().product();
                let data: Vec<T> = if shape.len() == 1 {
                    vec![T::one(); n]
                } else {
                    (0..n)
                        .map(|_| loop {
                            let x: f64 = normal.sample(rng);
                            if x.abs() <= 2.0 * INIT_STD {
                                break T::from_f64_lossy(x);
                            }
                        })
                        .collect()
                };
                Parameter::new(name, Tensor::new(shape, data).expect("spec shape"))
            })
            .collect();
        Self::assemble(config.clone(), layout, params)
    }

    /// Builds a model from parameters in [`parameter_specs`] order, checking
    /// names and shapes.
    pub fn from_parameters(config: &ModelConfig, params: Vec<Parameter<T>>) -> Result<Self> {
        config.validate()?;
        let (layout, specs) = parameter_specs(config);
        if specs.len() != params.len() {
            return Err(ArpgError::Config(format!(
                "config expects {} parameters, got {}",
                specs.len(),
                params.len()
            )));
        }
        for ((name, shape), p) in specs.iter().zip(&params) {
            if name != &p.name || shape.as_slice() != p.value.shape() {
                return Err(ArpgError::Config(format!(
                    "parameter mismatch: expected {name} {shape:?}, found {} {:?}",
                    p.name,
                    p.value.shape()
                )));
            }
        }
        Self::assemble(config.clone(), layout, params)
    }

    fn assemble(config: ModelConfig, layout: ParamLayout, params: Vec<Parameter<T>>) -> Result<Self> {
        let rope = RopeTable::new(config.seq_len() + 1, config.head_dim(), config.rope_base)?;
        Ok(ArpgModel {
            config,
            layout,
            params,
            rope,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn layout(&self) -> &ParamLayout {
        &self.layout
    }

    pub fn params(&self) -> &[Parameter<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Parameter<T>] {
        &mut self.params
    }

    pub fn rope(&self) -> &RopeTable<T> {
        &self.rope
    }

    pub fn head_layout(&self) -> HeadLayout {
        HeadLayout {
            heads: self.config.heads,
            head_dim: self.config.head_dim(),
        }
    }

    /// Borrow of the parameter values at `index`.
    pub fn weight(&self, index: usize) -> &[T] {
        self.params[index].value.data()
    }

    pub fn param_by_name(&self, name: &str) -> Option<&Parameter<T>> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn num_parameters(&self) -> usize {
        self.params.iter().map(Parameter::numel).sum()
    }

    /// Same model with the rotary table regenerated for `positions` entries
    /// (used when decoding grids larger than the training grid).
    pub fn with_rope_positions(&self, positions: usize) -> Result<Self> {
        let mut m = self.clone();
        m.rope = self.rope.extended(positions)?;
        Ok(m)
    }

    pub fn zero_grad(&mut self) {
        self.params.iter_mut().for_each(Parameter::zero_grad);
    }

    /// Converts every parameter to another precision.
    pub fn cast<U: Scalar>(&self) -> ArpgModel<U> {
        let params = self
            .params
            .iter()
            .map(|p| Parameter::new(p.name.clone(), p.value.cast()))
            .collect();
        ArpgModel::assemble(self.config.clone(), self.layout.clone(), params)
            .expect("rope table already validated")
    }
}
