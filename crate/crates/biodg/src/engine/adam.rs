//! Adam optimizer.
//!
//! Standard bias-corrected Adam over the parameter slots a model exposes.
//! Moment buffers are allocated on first step and keyed by slot order,
//! which models must keep stable across steps. A non-finite gradient
//! aborts the step with diagnostics rather than silently corrupting the
//! parameters.

use super::layers::ParamSlot;
use super::scalar::Scalar;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 1e-3, beta1: 0.9, beta2: 0.999, epsilon: 1e-8 }
    }
}

#[derive(Debug)]
pub struct Adam<S> {
    cfg: AdamConfig,
    step: u64,
    moments: Vec<(Vec<S>, Vec<S>)>,
}

impl<S: Scalar> Adam<S> {
    pub fn new(cfg: AdamConfig) -> Self {
        Adam { cfg, step: 0, moments: Vec::new() }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One update over all slots. Slot count and sizes must match the
    /// first call; gradients must be finite.
    pub fn step(&mut self, slots: &mut [ParamSlot<'_, S>]) -> Result<()> {
        if self.moments.is_empty() {
            self.moments = slots
                .iter()
                .map(|s| (vec![S::zero(); s.values.len()], vec![S::zero(); s.values.len()]))
                .collect();
        }
        if self.moments.len() != slots.len() {
            return Err(Error::State(format!(
                "optimizer saw {} slots, expected {}",
                slots.len(),
                self.moments.len()
            )));
        }
        self.step += 1;
        let t = self.step as i32;
        let b1 = S::from_f64(self.cfg.beta1);
        let b2 = S::from_f64(self.cfg.beta2);
        let lr = S::from_f64(self.cfg.lr);
        let eps = S::from_f64(self.cfg.epsilon);
        let one = S::one();
        let corr1 = one - b1.powi(t);
        let corr2 = one - b2.powi(t);

        for (slot_idx, (slot, (m, v))) in slots.iter_mut().zip(&mut self.moments).enumerate() {
            if slot.values.len() != m.len() {
                return Err(Error::State(format!(
                    "slot {slot_idx} changed size: {} vs {}",
                    slot.values.len(),
                    m.len()
                )));
            }
            for i in 0..slot.values.len() {
                let g = slot.grads[i];
                if !g.is_finite() {
                    return Err(Error::Training(format!(
                        "non-finite gradient in slot {slot_idx} element {i} at step {}",
                        self.step
                    )));
                }
                m[i] = b1 * m[i] + (one - b1) * g;
                v[i] = b2 * v[i] + (one - b2) * g * g;
                let m_hat = m[i] / corr1;
                let v_hat = v[i] / corr2;
                slot.values[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
