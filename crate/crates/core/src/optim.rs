//! AdamW with bias correction and decoupled weight decay.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Parameters;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// Optimizer state: step count and first/second moments per tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub config: AdamWConfig,
    pub step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new<P: Parameters>(config: AdamWConfig, params: &P) -> Self {
        let zeros: Vec<Vec<f64>> = params.named_tensors().iter().map(|(_, t)| vec![0.0; t.len()]).collect();
        AdamW {
            config,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn first_moments(&self) -> &[Vec<f64>] {
        &self.m
    }

    pub fn second_moments(&self) -> &[Vec<f64>] {
        &self.v
    }

    /// One update:
    ///
    /// ```text
    /// p -= lr * wd * p
    /// m = b1 m + (1 - b1) g ;  v = b2 v + (1 - b2) g^2
    /// p -= lr * (m / (1 - b1^t)) / (sqrt(v / (1 - b2^t)) + eps)
    /// ```
    pub fn step<P: Parameters>(&mut self, params: &mut P, grads: &P) -> Result<()> {
        let c = self.config;
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let grad_tensors = grads.named_tensors();
        let names: Vec<String> = grad_tensors.iter().map(|(n, _)| n.clone()).collect();
        for (ti, (p, (_, g))) in params.tensors_mut().into_iter().zip(grad_tensors).enumerate() {
            let m = &mut self.m[ti];
            let v = &mut self.v[ti];
            for i in 0..p.data.len() {
                let gi = g.data[i];
                m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * gi;
                v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * gi * gi;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                let w = p.data[i] - c.lr * c.weight_decay * p.data[i];
                p.data[i] = w - c.lr * mhat / (vhat.sqrt() + c.eps);
                if !p.data[i].is_finite() {
                    return Err(Error::Numeric(format!("non-finite update in {}", names[ti])));
                }
            }
        }
        Ok(())
    }
}

/// Single-step convenience matching the functional form
/// `adamw_step(params, grads, state)`.
pub fn adamw_step<P: Parameters>(params: &mut P, grads: &P, state: &mut AdamW) -> Result<()> {
    state.step(params, grads)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Tensor;

    #[derive(Clone)]
    struct Scalar(Tensor);

    impl Parameters for Scalar {
        fn named_tensors(&self) -> Vec<(String, &Tensor)> {
            vec![("w".into(), &self.0)]
        }
        fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
            vec![&mut self.0]
        }
    }

    fn scalar(v: f64) -> Scalar {
        Scalar(Tensor { shape: vec![1], data: vec![v] })
    }

    #[test]
    fn first_step_is_a_sign_step() {
        let mut p = scalar(1.0);
        let cfg = AdamWConfig { lr: 0.01, weight_decay: 0.0, ..Default::default() };
        let mut opt = AdamW::new(cfg, &p);
        adamw_step(&mut p, &scalar(0.5), &mut opt).unwrap();
        assert!((p.0.data[0] - 0.99).abs() < 1e-9);
        assert_eq!(opt.step, 1);
    }

    #[test]
    fn zero_gradient_without_decay_is_a_no_op() {
        let mut p = scalar(0.7);
        let mut opt = AdamW::new(AdamWConfig { weight_decay: 0.0, ..Default::default() }, &p);
        for _ in 0..3 {
            opt.step(&mut p, &scalar(0.0)).unwrap();
        }
        assert_eq!(p.0.data[0], 0.7);
    }

    #[test]
    fn decay_is_decoupled() {
        let mut p = scalar(2.0);
        let cfg = AdamWConfig { lr: 0.1, weight_decay: 0.5, ..Default::default() };
        let mut opt = AdamW::new(cfg, &p);
        opt.step(&mut p, &scalar(0.0)).unwrap();
        assert_eq!(p.0.data[0], 2.0 - 0.1 * 0.5 * 2.0);
    }

    #[test]
    fn non_finite_update_is_an_error() {
        let mut p = scalar(1.0);
        let mut opt = AdamW::new(AdamWConfig::default(), &p);
        assert!(matches!(opt.step(&mut p, &scalar(f64::NAN)), Err(Error::Numeric(_))));
    }
}
