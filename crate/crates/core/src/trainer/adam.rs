//! Bias-corrected Adam over the trainable subset of a parameter registry.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::param::ParamRegistry;
use crate::tensor::Element;

#[derive(Debug, Clone, Copy)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

struct Moments<F> {
    m: Vec<F>,
    v: Vec<F>,
}

/// Optimizer state persists per parameter name; frozen parameters are never
/// touched. A missing gradient counts as zero.
pub struct Adam<F: Element> {
    config: AdamConfig,
    states: BTreeMap<String, Moments<F>>,
    step_count: u64,
}

impl<F: Element> Adam<F> {
    pub fn new(config: AdamConfig) -> Self {
        Adam {
            config,
            states: BTreeMap::new(),
            step_count: 0,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step_count
    }

    pub fn step(&mut self, registry: &ParamRegistry<F>) -> Result<()> {
        self.step_count += 1;
        let t = self.step_count as i32;
        let b1 = F::from_f64(self.config.beta1);
        let b2 = F::from_f64(self.config.beta2);
        let lr = F::from_f64(self.config.learning_rate);
        let eps = F::from_f64(self.config.epsilon);
        let bias1 = F::one() - b1.powi(t);
        let bias2 = F::one() - b2.powi(t);

        for param in registry.iter() {
            if param.frozen() {
                continue;
            }
            let grad = param.tensor().grad();
            let state = self
                .states
                .entry(param.name().to_string())
                .or_insert_with(|| Moments {
                    m: vec![F::zero(); param.numel()],
                    v: vec![F::zero(); param.numel()],
                });
            let mut data = param.tensor().data_mut();
            for i in 0..data.len() {
                let g = grad.as_ref().map_or(F::zero(), |g| g[i]);
                if g.into_f64().is_nan() {
                    return Err(Error::NanGradient {
                        name: param.name().to_string(),
                    });
                }
                state.m[i] = b1 * state.m[i] + (F::one() - b1) * g;
                state.v[i] = b2 * state.v[i] + (F::one() - b2) * g * g;
                let m_hat = state.m[i] / bias1;
                let v_hat = state.v[i] / bias2;
                data[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::ops::{mul, sub, sum_all};
    use crate::tensor::{backward, Tensor};

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        let reg = {
            let mut r = ParamRegistry::new();
            r.add("x", Tensor::<f64>::leaf(&[1], vec![5.0], true).unwrap())
                .unwrap();
            r
        };
        let x = reg.get("x").unwrap().tensor().clone();
        x.grad_write(|g| g[0] += 3.0);
        let mut adam = Adam::new(AdamConfig {
            learning_rate: 0.1,
            ..AdamConfig::default()
        });
        adam.step(&reg).unwrap();
        // First-step update is -lr * g / (|g| + eps) ~ -lr * sign(g).
        assert!((x.data()[0] - (5.0 - 0.1)).abs() < 1e-6);
    }

    #[test]
    fn zero_gradient_leaves_fresh_parameter_unchanged() {
        let reg = {
            let mut r = ParamRegistry::new();
            r.add("x", Tensor::<f64>::leaf(&[2], vec![1.0, -2.0], true).unwrap())
                .unwrap();
            r
        };
        let mut adam = Adam::new(AdamConfig::default());
        adam.step(&reg).unwrap();
        let x = reg.get("x").unwrap().tensor();
        assert_eq!(*x.data(), vec![1.0, -2.0]);
    }

    #[test]
    fn nan_gradient_names_the_parameter() {
        let reg = {
            let mut r = ParamRegistry::new();
            r.add("bad", Tensor::<f64>::leaf(&[1], vec![0.0], true).unwrap())
                .unwrap();
            r
        };
        reg.get("bad").unwrap().tensor().grad_write(|g| g[0] = f64::NAN);
        let mut adam = Adam::new(AdamConfig::default());
        match adam.step(&reg) {
            Err(Error::NanGradient { name }) => assert_eq!(name, "bad"),
            other => panic!("expected NanGradient, got {other:?}"),
        }
    }

    #[test]
    fn frozen_parameters_are_untouched() {
        let reg = {
            let mut r = ParamRegistry::new();
            r.add("w", Tensor::<f64>::leaf(&[1], vec![1.0], true).unwrap())
                .unwrap();
            r
        };
        reg.get("w").unwrap().set_frozen(true);
        reg.get("w").unwrap().tensor().grad_write(|g| g[0] = 7.0);
        let mut adam = Adam::new(AdamConfig::default());
        adam.step(&reg).unwrap();
        assert_eq!(reg.get("w").unwrap().tensor().data()[0], 1.0);
    }

    #[test]
    fn descends_a_convex_quadratic() {
        // Minimize (x - 3)^2 for 100 steps; the loss trend must be downward
        // after warm-in and the final loss tiny.
        let reg = {
            let mut r = ParamRegistry::new();
            r.add("x", Tensor::<f64>::leaf(&[1], vec![-4.0], true).unwrap())
                .unwrap();
            r
        };
        let x = reg.get("x").unwrap().tensor().clone();
        let target = Tensor::<f64>::constant(&[1], vec![3.0]).unwrap();
        let mut adam = Adam::new(AdamConfig {
            learning_rate: 0.3,
            ..AdamConfig::default()
        });
        let mut losses = Vec::new();
        for _ in 0..100 {
            reg.zero_grads();
            let diff = sub(&x, &target).unwrap();
            let loss = sum_all(&mul(&diff, &diff).unwrap());
            losses.push(loss.value());
            backward(&loss).unwrap();
            adam.step(&reg).unwrap();
        }
        assert!(losses[99] < 1e-3, "final loss {}", losses[99]);
        for w in losses[10..].windows(2) {
            assert!(w[1] <= w[0] + 0.3, "non-monotone spike: {w:?}");
        }
        assert!(losses[99] < losses[10]);
    }
}
