//! AdamW with decoupled weight decay.

use super::{Real, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamWConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig { lr: 2e-4, weight_decay: 0.01, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Moment buffers for a fixed, ordered parameter list.
#[derive(Clone, Debug)]
pub struct OptimizerState<T: Real = f32> {
    pub config: AdamWConfig,
    step: u64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Real> OptimizerState<T> {
    pub fn new(params: &[Tensor<T>], config: AdamWConfig) -> Self {
        OptimizerState {
            config,
            step: 0,
            m: params.iter().map(|p| vec![T::ZERO; p.numel()]).collect(),
            v: params.iter().map(|p| vec![T::ZERO; p.numel()]).collect(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn first_moment(&self, i: usize) -> &[T] {
        &self.m[i]
    }

    pub fn second_moment(&self, i: usize) -> &[T] {
        &self.v[i]
    }

    /// One update of every parameter from its accumulated gradient:
    /// `p *= 1 - lr*wd`, then the bias-corrected Adam step.
    pub fn step(&mut self, params: &[Tensor<T>]) -> Result<()> {
        if params.len() != self.m.len() {
            return Err(Error::Contract(format!(
                "optimizer tracks {} parameters, got {}",
                self.m.len(),
                params.len()
            )));
        }
        for (i, p) in params.iter().enumerate() {
            if p.numel() != self.m[i].len() {
                return Err(Error::Contract(format!("parameter {i} changed size")));
            }
            if p.grad_ref().is_none() {
                return Err(Error::Contract(format!("parameter {i} has no gradient")));
            }
        }
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let decay = 1.0 - c.lr * c.weight_decay;
        for (i, p) in params.iter().enumerate() {
            let grad = p.grad_ref();
            let g = grad.as_ref().expect("checked above");
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            p.update_data(|data| {
                for j in 0..data.len() {
                    let gj = g[j].to_f64();
                    let mj = c.beta1 * m[j].to_f64() + (1.0 - c.beta1) * gj;
                    let vj = c.beta2 * v[j].to_f64() + (1.0 - c.beta2) * gj * gj;
                    m[j] = T::from_f64(mj);
                    v[j] = T::from_f64(vj);
                    let upd = (mj / bc1) / ((vj / bc2).sqrt() + c.eps);
                    data[j] = T::from_f64(data[j].to_f64() * decay - c.lr * upd);
                }
            });
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_step(p0: f32, g: f32, config: AdamWConfig) -> f32 {
        let p = Tensor::<f32>::param(vec![p0], &[1]).unwrap();
        p.mul(&Tensor::scalar(g)).unwrap().sum().unwrap().backward().unwrap();
        let mut st = OptimizerState::new(std::slice::from_ref(&p), config);
        st.step(std::slice::from_ref(&p)).unwrap();
        assert_eq!(st.step_count(), 1);
        p.item()
    }

    #[test]
    fn zero_grad_zero_decay_is_fixed_point() {
        let cfg = AdamWConfig { weight_decay: 0.0, ..Default::default() };
        assert_eq!(one_step(0.7, 0.0, cfg), 0.7);
    }

    #[test]
    fn unit_gradient_step() {
        let cfg = AdamWConfig { weight_decay: 0.0, ..Default::default() };
        // m_hat = v_hat = 1, so the step is lr / (1 + eps).
        let want = 1.0 - 2e-4 / (1.0 + 1e-8);
        assert!((one_step(1.0, 1.0, cfg) as f64 - want).abs() < 1e-7);
    }

    #[test]
    fn decoupled_decay_shrinks() {
        let p = one_step(1.0, 0.0, AdamWConfig::default()) as f64;
        assert!((p - (1.0 - 2e-6)).abs() < 1e-7);
    }

    #[test]
    fn missing_gradient_rejected() {
        let p = Tensor::<f32>::param(vec![1.0], &[1]).unwrap();
        let mut st = OptimizerState::new(std::slice::from_ref(&p), AdamWConfig::default());
        assert!(matches!(st.step(std::slice::from_ref(&p)), Err(Error::Contract(_))));
        assert_eq!(st.step_count(), 0);
    }
}
