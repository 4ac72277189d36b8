//! Adam optimizer with bias correction, and the halving learning-rate
//! schedule used by training.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

use super::ParamSet;

/// First/second moment state, kept in f64 regardless of the parameter scalar.
pub struct AdamState {
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new() -> Self {
        AdamState {
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    /// One Adam update over every parameter, in insertion order.
    /// The learning rate is supplied per call so a schedule can drive it.
    pub fn step<S: Scalar>(&mut self, params: &ParamSet<S>, lr: f64) -> Result<()> {
        if self.m.is_empty() {
            for (_, t) in params.iter() {
                self.m.push(vec![0.0; t.numel()]);
                self.v.push(vec![0.0; t.numel()]);
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);

        for (i, (name, p)) in params.iter().enumerate() {
            let grad = p
                .grad_vec()
                .ok_or_else(|| Error::State(format!("missing gradient for parameter {name}")))?;
            let mut vals = p.value_vec();
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for j in 0..vals.len() {
                let g = grad[j].to_f64_();
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g * g;
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                let upd = lr * m_hat / (v_hat.sqrt() + self.eps);
                vals[j] = S::from_f64_(vals[j].to_f64_() - upd);
            }
            p.set_values(vals);
        }
        Ok(())
    }
}

impl Default for AdamState {
    fn default() -> Self {
        Self::new()
    }
}

/// Learning rate halved at each listed epoch boundary.
#[derive(Debug, Clone)]
pub struct LrSchedule {
    pub base: f64,
    pub decay_epochs: Vec<usize>,
}

impl LrSchedule {
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let halvings = self.decay_epochs.iter().filter(|&&d| epoch >= d).count();
        self.base / f64::powi(2.0, halvings as i32)
    }
}
