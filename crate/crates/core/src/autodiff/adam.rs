use serde::{Deserialize, Serialize};

use super::{ParamSet, Scalar};
use crate::error::{Error, Result};

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
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-7,
        }
    }
}

/// Adam with bias-corrected moments.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam<T> {
    pub config: AdamConfig,
    pub step: u64,
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(config: AdamConfig, params: &ParamSet<T>) -> Self {
        let zeros = || params.params.iter().map(|p| vec![T::zero(); p.value.len()]).collect();
        Self {
            config,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    /// One update. Fails without touching anything if a gradient is not finite.
    pub fn update(&mut self, params: &mut ParamSet<T>, grads: &[Vec<T>]) -> Result<()> {
        if grads.len() != params.len() {
            return Err(Error::Shape(format!("{} gradients for {} parameters", grads.len(), params.len())));
        }
        for (p, g) in params.params.iter().zip(grads) {
            if g.len() != p.value.len() {
                return Err(Error::Shape(format!("gradient of {} has {} values, expected {}", p.name, g.len(), p.value.len())));
            }
            if let Some(i) = g.iter().position(|v| !v.is_finite()) {
                return Err(Error::Numerics(format!(
                    "non-finite gradient {:?} in {} at index {i} (step {})",
                    g[i],
                    p.name,
                    self.step + 1
                )));
            }
        }
        self.step += 1;
        let c = self.config;
        let (b1, b2) = (T::from_f64(c.beta1), T::from_f64(c.beta2));
        let corr1 = T::from_f64(1.0 - c.beta1.powi(self.step as i32));
        let corr2 = T::from_f64(1.0 - c.beta2.powi(self.step as i32));
        let (lr, eps, one) = (T::from_f64(c.lr), T::from_f64(c.eps), T::one());
        for ((p, g), (m, v)) in params.params.iter_mut().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            for (((w, &gi), mi), vi) in p.value.data.iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = b1 * *mi + (one - b1) * gi;
                *vi = b2 * *vi + (one - b2) * gi * gi;
                let m_hat = *mi / corr1;
                let v_hat = *vi / corr2;
                *w = *w - lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tensor;

    #[test]
    fn defaults_and_first_step() {
        let c = AdamConfig::default();
        assert_eq!(c.lr, 0.0001);
        let mut ps = ParamSet::<f64>::new();
        ps.add("w", Tensor::filled(&[3], 0.5));
        let mut adam = Adam::new(c, &ps);
        adam.update(&mut ps, &[vec![1.0; 3]]).unwrap();
        for &w in &ps.get(0).data {
            // m_hat = v_hat = 1, so the step is lr / (1 + eps).
            assert!((w - (0.5 - 1e-4 / (1.0 + 1e-7))).abs() < 1e-15);
        }
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut ps = ParamSet::<f32>::new();
        ps.add("w", Tensor::filled(&[4], 0.25));
        let before = ps.clone();
        let mut adam = Adam::new(AdamConfig::default(), &ps);
        for _ in 0..10 {
            adam.update(&mut ps, &[vec![0.0; 4]]).unwrap();
        }
        assert_eq!(ps, before);
    }

    #[test]
    fn non_finite_gradient_is_numerics_error() {
        let mut ps = ParamSet::<f64>::new();
        ps.add("w", Tensor::filled(&[2], 1.0));
        let before = ps.clone();
        let mut adam = Adam::new(AdamConfig::default(), &ps);
        let err = adam.update(&mut ps, &[vec![0.0, f64::NAN]]).unwrap_err();
        assert!(matches!(err, Error::Numerics(_)));
        assert_eq!(ps, before);
        assert_eq!(adam.step, 0);
    }
}
