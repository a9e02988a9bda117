//! Adam with L2 weight decay folded into the gradient.

use serde::{Deserialize, Serialize};

use super::Param;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-6,
        }
    }
}

/// Moment estimates are kept per parameter name, in visiting order.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    pub step: u64,
    pub slots: Vec<AdamSlot>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamSlot {
    pub name: String,
    pub m: Tensor,
    pub v: Tensor,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Adam {
            config,
            step: 0,
            slots: Vec::new(),
        }
    }

    /// Apply one update. `visit` must enumerate the same parameters in the
    /// same order on every call.
    pub fn step(&mut self, visit: impl FnOnce(&mut dyn FnMut(&str, &mut Param))) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let cfg = self.config.clone();
        let bc1 = 1.0 - cfg.beta1.powi(t);
        let bc2 = 1.0 - cfg.beta2.powi(t);
        let first_call = self.slots.is_empty();
        let slots = &mut self.slots;
        let mut idx = 0usize;
        let mut failure: Option<Error> = None;
        visit(&mut |name: &str, p: &mut Param| {
            if failure.is_some() {
                return;
            }
            if first_call {
                slots.push(AdamSlot {
                    name: name.to_string(),
                    m: Tensor::zeros(p.value.shape()),
                    v: Tensor::zeros(p.value.shape()),
                });
            }
            let Some(slot) = slots.get_mut(idx) else {
                failure = Some(Error::Validation(format!("optimizer has no slot for {name}")));
                return;
            };
            if slot.name != name || slot.m.shape() != p.value.shape() {
                failure = Some(Error::Validation(format!(
                    "optimizer slot {} does not match parameter {name}",
                    slot.name
                )));
                return;
            }
            idx += 1;
            let values = p.value.data_mut();
            let grads = p.grad.data();
            let m = slot.m.data_mut();
            let v = slot.v.data_mut();
            for i in 0..values.len() {
                let g = grads[i] + cfg.weight_decay * values[i];
                m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
                v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                values[i] -= cfg.lr * mhat / (vhat.sqrt() + cfg.eps);
            }
        });
        if let Some(e) = failure {
            return Err(e);
        }
        if idx != self.slots.len() {
            return Err(Error::Validation(format!(
                "optimizer saw {idx} parameters, expected {}",
                self.slots.len()
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_learning_rate() {
        // With bias correction the first Adam step is lr * sign(g).
        let mut p = Param::new(Tensor::from_vec(&[2], vec![1.0, -1.0]).unwrap());
        p.grad = Tensor::from_vec(&[2], vec![0.5, -3.0]).unwrap();
        let mut opt = Adam::new(AdamConfig {
            weight_decay: 0.0,
            ..AdamConfig::default()
        });
        opt.step(|f| f("p", &mut p)).unwrap();
        assert!((p.value.data()[0] - (1.0 - 1e-3)).abs() < 1e-9);
        assert!((p.value.data()[1] - (-1.0 + 1e-3)).abs() < 1e-9);
    }

    #[test]
    fn mismatched_parameter_order_is_rejected() {
        let mut a = Param::new(Tensor::zeros(&[1]));
        let mut b = Param::new(Tensor::zeros(&[1]));
        let mut opt = Adam::new(AdamConfig::default());
        opt.step(|f| {
            f("a", &mut a);
            f("b", &mut b);
        })
        .unwrap();
        let err = opt.step(|f| {
            f("b", &mut b);
            f("a", &mut a);
        });
        assert!(err.is_err());
    }
}
