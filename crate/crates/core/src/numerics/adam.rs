use serde::{Deserialize, Serialize};

use super::{shape_err, Element, NumericsError, Result, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr > 0.0
            && self.lr.is_finite()
            && (0.0..1.0).contains(&self.beta1)
            && self.beta1 > 0.0
            && (0.0..1.0).contains(&self.beta2)
            && self.beta2 > 0.0
            && self.eps > 0.0;
        if ok {
            Ok(())
        } else {
            Err(NumericsError::InvalidArgument {
                op: "adam",
                detail: format!("{self:?}"),
            })
        }
    }
}

/// Moment buffers for bias-corrected Adam.
#[derive(Debug, Clone)]
pub struct AdamState<T: Element = f64> {
    config: AdamConfig,
    step: u64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Element> AdamState<T> {
    /// Zeroed moments shaped like `params`. Frozen tensors get empty buffers.
    pub fn new(config: AdamConfig, params: &[Tensor<T>]) -> Result<Self> {
        config.validate()?;
        let buf = |p: &Tensor<T>| {
            if p.requires_grad() {
                vec![T::zero(); p.len()]
            } else {
                Vec::new()
            }
        };
        Ok(AdamState {
            config,
            step: 0,
            m: params.iter().map(buf).collect(),
            v: params.iter().map(buf).collect(),
        })
    }

    pub fn config(&self) -> &AdamConfig {
        &self.config
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn first_moment(&self, index: usize) -> &[T] {
        &self.m[index]
    }

    pub fn second_moment(&self, index: usize) -> &[T] {
        &self.v[index]
    }

    /// One update of every trainable tensor in `params`, then zeroes their grads.
    pub fn step(&mut self, params: &mut [Tensor<T>]) -> Result<()> {
        if params.len() != self.m.len() {
            return Err(shape_err(
                "adam",
                format!("state tracks {} tensors, got {}", self.m.len(), params.len()),
            ));
        }
        for (i, p) in params.iter().enumerate() {
            if !p.requires_grad() {
                continue;
            }
            if p.grad().is_none() {
                return Err(NumericsError::MissingGrad(i));
            }
            if self.m[i].len() != p.len() {
                return Err(shape_err("adam", format!("moment {i} does not match its parameter")));
            }
        }
        self.step += 1;
        let c = self.config;
        let (b1, b2) = (T::of(c.beta1), T::of(c.beta2));
        let bc1 = T::of(1.0 - c.beta1.powf(self.step as f64));
        let bc2 = T::of(1.0 - c.beta2.powf(self.step as f64));
        let (lr, eps) = (T::of(c.lr), T::of(c.eps));
        let one = T::one();
        for (i, p) in params.iter_mut().enumerate() {
            if !p.requires_grad() {
                continue;
            }
            let grad = p.grad().expect("checked above").to_vec();
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (((w, &g), mi), vi) in p.data_mut().iter_mut().zip(&grad).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = b1 * *mi + (one - b1) * g;
                *vi = b2 * *vi + (one - b2) * g * g;
                let m_hat = *mi / bc1;
                let v_hat = *vi / bc2;
                *w -= lr * m_hat / (v_hat.sqrt() + eps);
            }
            if p.data().iter().any(|w| !w.is_finite()) {
                return Err(NumericsError::NonFinite {
                    op: "adam",
                    phase: "update",
                });
            }
            p.zero_grad();
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_param(v: f64) -> Tensor<f64> {
        Tensor::new(vec![1], vec![v]).unwrap().with_grad()
    }

    #[test]
    fn first_step_moves_by_learning_rate_against_gradient_sign() {
        let mut params = vec![scalar_param(1.0), scalar_param(-2.0)];
        params[0].accumulate_grad(&[0.37]).unwrap();
        params[1].accumulate_grad(&[-12.0]).unwrap();
        let mut adam = AdamState::new(AdamConfig { lr: 0.01, ..Default::default() }, &params).unwrap();
        adam.step(&mut params).unwrap();
        assert!((params[0].item() - (1.0 - 0.01)).abs() < 1e-9);
        assert!((params[1].item() - (-2.0 + 0.01)).abs() < 1e-9);
        assert_eq!(params[0].grad().unwrap(), &[0.0]);
        assert_eq!(adam.step_count(), 1);
    }

    #[test]
    fn zero_gradient_is_identity() {
        let mut params = vec![Tensor::new(vec![3], vec![0.5, -1.0, 2.0]).unwrap().with_grad()];
        let mut adam = AdamState::new(AdamConfig::default(), &params).unwrap();
        for _ in 0..5 {
            params[0].accumulate_grad(&[0.0; 3]).unwrap();
            adam.step(&mut params).unwrap();
        }
        assert_eq!(params[0].data(), &[0.5, -1.0, 2.0]);
        assert!(adam.second_moment(0).iter().all(|&v| v == 0.0));
        assert_eq!(adam.step_count(), 5);
    }

    #[test]
    fn missing_grad_is_an_error() {
        let mut params = vec![scalar_param(1.0)];
        let mut adam = AdamState::new(AdamConfig::default(), &params).unwrap();
        assert_eq!(adam.step(&mut params).unwrap_err(), NumericsError::MissingGrad(0));
    }

    #[test]
    fn frozen_tensors_are_skipped() {
        let mut params = vec![scalar_param(1.0), Tensor::new(vec![1], vec![4.0]).unwrap()];
        params[0].accumulate_grad(&[1.0]).unwrap();
        let mut adam = AdamState::new(AdamConfig::default(), &params).unwrap();
        adam.step(&mut params).unwrap();
        assert_eq!(params[1].item(), 4.0);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let params = vec![scalar_param(1.0)];
        let mut adam = AdamState::new(AdamConfig::default(), &params).unwrap();
        let mut other = vec![scalar_param(1.0), scalar_param(2.0)];
        assert!(adam.step(&mut other).is_err());
    }

    #[test]
    fn invalid_config_is_rejected() {
        let params = vec![scalar_param(1.0)];
        let bad = AdamConfig { beta1: 1.0, ..Default::default() };
        assert!(AdamState::new(bad, &params).is_err());
        let bad = AdamConfig { lr: 0.0, ..Default::default() };
        assert!(AdamState::new(bad, &params).is_err());
    }
}
