use serde::{Deserialize, Serialize};

use super::{Result, TensorError};
use crate::params::ParameterSet;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First/second moment buffers for every tensor of one [`ParameterSet`].
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(params: &ParameterSet, config: AdamConfig) -> Self {
        let zeros = || params.iter().map(|(_, t)| vec![0.0; t.numel()]).collect();
        Self {
            config,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Applies one bias-corrected Adam update and clears the gradients.
    /// Every parameter must carry a gradient.
    pub fn step(&mut self, params: &mut ParameterSet) -> Result<()> {
        if params.len() != self.m.len() {
            return Err(TensorError::InvalidArgument {
                op: "adam_step",
                reason: format!("state tracks {} tensors, got {}", self.m.len(), params.len()),
            });
        }
        if let Some((name, _)) = params.iter().find(|(_, t)| t.grad.is_none()) {
            return Err(TensorError::MissingGrad(name.to_string()));
        }
        self.step += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for ((_, t), (m, v)) in params.iter_mut().zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            let g = t.grad.take().expect("checked above");
            for (((p, g), m), v) in t.data_mut().iter_mut().zip(&g).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = beta1 * *m + (1.0 - beta1) * g;
                *v = beta2 * *v + (1.0 - beta2) * g * g;
                let mhat = *m / bc1;
                let vhat = *v / bc2;
                *p -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn scalar_param(v: f64) -> ParameterSet {
        let mut p = ParameterSet::new();
        p.insert("w", Tensor::scalar(v)).unwrap();
        p
    }

    fn set_grad(p: &mut ParameterSet, g: f64) {
        p.get_mut("w").unwrap().grad = Some(vec![g]);
    }

    #[test]
    fn zero_gradient_is_noop() {
        let mut p = scalar_param(0.7);
        let mut st = AdamState::new(&p, AdamConfig::default());
        for _ in 0..5 {
            set_grad(&mut p, 0.0);
            st.step(&mut p).unwrap();
        }
        assert_eq!(p.get("w").unwrap().item(), 0.7);
    }

    #[test]
    fn first_step_moves_by_lr() {
        // t=1: m = 0.1, v = 0.001, m_hat = v_hat = 1, update = lr / (1 + eps).
        let mut p = scalar_param(0.0);
        let mut st = AdamState::new(&p, AdamConfig::default());
        set_grad(&mut p, 1.0);
        st.step(&mut p).unwrap();
        let expected = -1e-3 / (1.0 + 1e-8);
        assert!((p.get("w").unwrap().item() - expected).abs() < 1e-15);
        assert!(p.get("w").unwrap().grad.is_none());
    }

    #[test]
    fn constant_gradient_descends() {
        let mut p = scalar_param(1.0);
        let mut st = AdamState::new(&p, AdamConfig::default());
        for _ in 0..100 {
            set_grad(&mut p, -2.0);
            st.step(&mut p).unwrap();
        }
        assert!(p.get("w").unwrap().item() > 1.0);
        assert_eq!(st.step_count(), 100);
    }

    #[test]
    fn missing_gradient_names_parameter() {
        let mut p = scalar_param(1.0);
        let mut st = AdamState::new(&p, AdamConfig::default());
        assert_eq!(st.step(&mut p).unwrap_err(), TensorError::MissingGrad("w".into()));
    }
}
