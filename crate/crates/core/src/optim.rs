//! AdamW with decoupled weight decay.

use crate::error::{Error, Result};
use crate::model::{Group, Model};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OptimHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled decay coefficient; the decay step is `lr · weight_decay · θ`.
    pub weight_decay: f64,
}

impl Default for OptimHyper {
    fn default() -> Self {
        OptimHyper {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

impl OptimHyper {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr > 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0
            && self.weight_decay >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid optimizer hyperparameters {self:?}")))
        }
    }
}

/// One AdamW update of a flat parameter slice at (1-based) step `t`.
pub fn adamw_step(
    theta: &mut [f64],
    grad: &[f64],
    m: &mut [f64],
    v: &mut [f64],
    t: u64,
    hyper: &OptimHyper,
) {
    let OptimHyper {
        lr,
        beta1,
        beta2,
        eps,
        weight_decay,
    } = *hyper;
    let bc1 = 1.0 - beta1.powi(t as i32);
    let bc2 = 1.0 - beta2.powi(t as i32);
    for i in 0..theta.len() {
        let g = grad[i];
        m[i] = beta1 * m[i] + (1.0 - beta1) * g;
        v[i] = beta2 * v[i] + (1.0 - beta2) * g * g;
        let m_hat = m[i] / bc1;
        let v_hat = v[i] / bc2;
        let old = theta[i];
        theta[i] = old - lr * m_hat / (v_hat.sqrt() + eps) - lr * weight_decay * old;
    }
}

/// Optimizer bound to one parameter group of a model. Each instance owns
/// its moments and step counter.
#[derive(Debug, Clone)]
pub struct AdamW {
    hyper: OptimHyper,
    group: Group,
    step: u64,
    moments: Vec<(Vec<f64>, Vec<f64>)>,
}

impl AdamW {
    pub fn new(hyper: OptimHyper, group: Group) -> Self {
        AdamW {
            hyper,
            group,
            step: 0,
            moments: Vec::new(),
        }
    }

    pub fn group(&self) -> Group {
        self.group
    }

    pub fn hyper(&self) -> &OptimHyper {
        &self.hyper
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update to every parameter of this optimizer's group.
    /// Fails without touching anything if a gradient is missing.
    pub fn step(&mut self, model: &mut Model) -> Result<()> {
        let idx = model.group_indices(self.group);
        if let Some(&missing) = idx.iter().find(|&&i| model.params()[i].grad.is_none()) {
            return Err(Error::Contract(format!(
                "optimizer step on {:?} without gradient for {}",
                self.group,
                model.params()[missing].name
            )));
        }
        if self.moments.is_empty() {
            self.moments = idx
                .iter()
                .map(|&i| {
                    let n = model.params()[i].value.numel();
                    (vec![0.0; n], vec![0.0; n])
                })
                .collect();
        }
        self.step += 1;
        for (slot, &i) in idx.iter().enumerate() {
            let p = &mut model.params_mut()[i];
            let grad = p.grad.as_ref().expect("checked above");
            let (m, v) = &mut self.moments[slot];
            adamw_step(p.value.data_mut(), grad.data(), m, v, self.step, &self.hyper);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_closed_form() {
        let h = OptimHyper::default();
        let (mut th, mut m, mut v) = (vec![1.0], vec![0.0], vec![0.0]);
        adamw_step(&mut th, &[1.0], &mut m, &mut v, 1, &h);
        // m_hat = v_hat = 1 at t = 1, so the step is lr / (1 + eps).
        let expected = 1.0 - 1e-4 / (1.0 + 1e-8);
        assert!((th[0] - expected).abs() < 1e-15);
        assert!((th[0] - 0.9999).abs() < 1e-10);
    }

    #[test]
    fn decay_only_step() {
        let h = OptimHyper {
            lr: 0.1,
            weight_decay: 0.1,
            ..OptimHyper::default()
        };
        let (mut th, mut m, mut v) = (vec![2.0], vec![0.0], vec![0.0]);
        adamw_step(&mut th, &[0.0], &mut m, &mut v, 1, &h);
        assert!((th[0] - 1.98).abs() < 1e-15);
        assert_eq!((m[0], v[0]), (0.0, 0.0));
    }

    #[test]
    fn hyper_validation() {
        assert!(OptimHyper::default().validate().is_ok());
        let bad = OptimHyper {
            beta1: 1.0,
            ..OptimHyper::default()
        };
        assert!(bad.validate().is_err());
        let bad = OptimHyper {
            lr: 0.0,
            ..OptimHyper::default()
        };
        assert!(bad.validate().is_err());
    }
}
