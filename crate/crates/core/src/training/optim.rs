use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{ArpgError, Result};
use crate::model::decays;
use crate::numcore::{Parameter, Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay: 0.05,
        }
    }
}

/// AdamW moments for a parameter list.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimState<T> {
    pub config: AdamWConfig,
    pub step: u64,
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
}

impl<T: Scalar> OptimState<T> {
    pub fn new(params: &[Parameter<T>], config: AdamWConfig) -> Self {
        OptimState {
            config,
            step: 0,
            m: params.iter().map(|p| vec![T::zero(); p.numel()]).collect(),
            v: params.iter().map(|p| vec![T::zero(); p.numel()]).collect(),
        }
    }

    /// Moments as named tensors for checkpointing.
    pub fn to_tensors(&self, params: &[Parameter<T>]) -> Vec<(String, Tensor<T>)> {
        let mut out = Vec::with_capacity(2 * params.len());
        for (which, moments) in [("m", &self.m), ("v", &self.v)] {
            for (p, data) in params.iter().zip(moments) {
                let t = Tensor::new(p.value.shape().to_vec(), data.clone()).expect("moment shape");
                out.push((format!("optim.{which}.{}", p.name), t));
            }
        }
        out
    }

    pub fn from_tensors(
        params: &[Parameter<T>],
        tensors: &[(String, Tensor<T>)],
        config: AdamWConfig,
        step: u64,
    ) -> Result<Self> {
        let find = |name: String, shape: &[usize]| -> Result<Vec<T>> {
            let (_, t) = tensors
                .iter()
                .find(|(n, _)| *n == name)
                .ok_or_else(|| ArpgError::Config(format!("snapshot lacks {name}")))?;
            if t.shape() != shape {
                return Err(ArpgError::Config(format!("{name} has shape {:?}", t.shape())));
            }
            Ok(t.data().to_vec())
        };
        let mut m = Vec::with_capacity(params.len());
        let mut v = Vec::with_capacity(params.len());
        for p in params {
            m.push(find(format!("optim.m.{}", p.name), p.value.shape())?);
            v.push(find(format!("optim.v.{}", p.name), p.value.shape())?);
        }
        Ok(OptimState { config, step, m, v })
    }
}

/// One bias-corrected AdamW update with decoupled weight decay:
/// `θ ← θ − lr·(m̂/(√v̂ + ε) + λθ)`; decay is skipped for norm gains and the
/// embedding table.
pub fn adamw_update<T: Scalar>(state: &mut OptimState<T>, params: &mut [Parameter<T>], lr: f64) {
    state.step += 1;
    let c = state.config;
    let t = state.step as i32;
    let bc1 = 1.0 - c.beta1.powi(t);
    let bc2 = 1.0 - c.beta2.powi(t);
    let (b1, b2) = (T::from_f64_lossy(c.beta1), T::from_f64_lossy(c.beta2));
    let (one_b1, one_b2) = (T::from_f64_lossy(1.0 - c.beta1), T::from_f64_lossy(1.0 - c.beta2));
    let (bc1, bc2) = (T::from_f64_lossy(bc1), T::from_f64_lossy(bc2));
    let (lr_t, eps) = (T::from_f64_lossy(lr), T::from_f64_lossy(c.eps));
    for ((p, m), v) in params.iter_mut().zip(&mut state.m).zip(&mut state.v) {
        let wd = if decays(&p.name) { T::from_f64_lossy(c.weight_decay) } else { T::zero() };
        let grad = &p.grad;
        for (i, x) in p.value.data_mut().iter_mut().enumerate() {
            let g = grad[i];
            m[i] = b1 * m[i] + one_b1 * g;
            v[i] = b2 * v[i] + one_b2 * g * g;
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            *x = *x - lr_t * (m_hat / (v_hat.sqrt() + eps) + wd * *x);
        }
    }
}

/// Global L2 norm of all gradients.
pub fn grad_norm<T: Scalar>(params: &[Parameter<T>]) -> f64 {
    params
        .iter()
        .flat_map(|p| p.grad.iter())
        .map(|g| {
            let g = g.to_f64().unwrap_or(f64::NAN);
            g * g
        })
        .sum::<f64>()
        .sqrt()
}

/// Rescales gradients so their global norm is at most `max_norm`; returns
/// the norm before clipping.
pub fn clip_grad_norm<T: Scalar>(params: &mut [Parameter<T>], max_norm: f64) -> f64 {
    let norm = grad_norm(params);
    if max_norm > 0.0 && norm > max_norm {
        let s = T::from_f64_lossy(max_norm / norm);
        for p in params.iter_mut() {
            p.grad.iter_mut().for_each(|g| *g = *g * s);
        }
    }
    norm
}

/// Linear warmup over `warmup_ratio·total` steps, then cosine decay to zero.
pub fn cosine_lr(base: f64, step: u64, total: u64, warmup_ratio: f64) -> f64 {
    let total = total.max(1);
    let warm = ((total as f64 * warmup_ratio).ceil() as u64).min(total);
    if step < warm {
        return base * (step + 1) as f64 / warm as f64;
    }
    let span = (total - warm).max(1) as f64;
    let progress = ((step - warm) as f64 / span).min(1.0);
    base * 0.5 * (1.0 + (PI * progress).cos())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn param(name: &str, value: f64, grad: f64) -> Parameter<f64> {
        let mut p = Parameter::new(name, Tensor::filled(&[2, 3], value));
        p.grad = vec![grad; 6];
        p
    }

    #[test]
    fn zero_grad_zero_decay_is_noop() {
        let mut ps = vec![param("w", 0.7, 0.0)];
        let cfg = AdamWConfig { weight_decay: 0.0, ..AdamWConfig::default() };
        let mut st = OptimState::new(&ps, cfg);
        adamw_update(&mut st, &mut ps, 0.1);
        assert!(ps[0].value.data().iter().all(|&x| x == 0.7));
    }

    #[test]
    fn single_step_closed_form() {
        let mut ps = vec![param("w", 0.5, 1.0)];
        let cfg = AdamWConfig { weight_decay: 0.0, ..AdamWConfig::default() };
        let mut st = OptimState::new(&ps, cfg);
        adamw_update(&mut st, &mut ps, 0.1);
        // m̂ = 1, v̂ = 1, so Δθ = −0.1 / (1 + ε)
        for &x in ps[0].value.data() {
            assert!((x - (0.5 - 0.1 / (1.0 + 1e-8))).abs() < 1e-12);
        }
    }

    #[test]
    fn decoupled_decay_shrinks_and_skips_norms() {
        let mut ps = vec![param("w", 2.0, 0.0), param("pass1.layer0.attn_norm", 2.0, 0.0)];
        let mut st = OptimState::new(&ps, AdamWConfig::default());
        for _ in 0..3 {
            adamw_update(&mut st, &mut ps, 0.1);
        }
        let expect = 2.0 * (1.0f64 - 0.1 * 0.05).powi(3);
        assert!((ps[0].value.data()[0] - expect).abs() < 1e-12);
        assert_eq!(ps[1].value.data()[0], 2.0);
    }

    #[test]
    fn clipping_bounds_norm() {
        let mut ps = vec![param("w", 0.0, 3.0)];
        let before = clip_grad_norm(&mut ps, 1.0);
        assert!((before - 3.0 * 6f64.sqrt()).abs() < 1e-12);
        assert!((grad_norm(&ps) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn schedule_shape() {
        assert!((cosine_lr(1.0, 0, 100, 0.1) - 0.1).abs() < 1e-12);
        assert!((cosine_lr(1.0, 9, 100, 0.1) - 1.0).abs() < 1e-12);
        assert!(cosine_lr(1.0, 55, 100, 0.1) < 1.0);
        assert!(cosine_lr(1.0, 99, 100, 0.1) < 0.01);
    }

    #[test]
    fn moments_roundtrip_through_tensors() {
        let ps = vec![param("w", 1.0, 1.0)];
        let mut st = OptimState::new(&ps, AdamWConfig::default());
        st.m[0][2] = 0.25;
        let back = OptimState::from_tensors(&ps, &st.to_tensors(&ps), st.config, st.step).unwrap();
        assert_eq!(back, st);
    }
}
