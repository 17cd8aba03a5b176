//! AdamW with decoupled weight decay, and the warmup-then-cosine learning
//! rate curve.

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::{c, Scalar};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

#[derive(Debug, Clone)]
struct Slot<T> {
    m: Vec<T>,
    v: Vec<T>,
    steps: u32,
}

/// Per-parameter moment buffers, addressed by a stable parameter index.
/// Parameters that never receive a gradient keep no state and are never
/// touched, weight decay included.
#[derive(Debug, Clone)]
pub struct AdamW<T> {
    pub config: AdamWConfig,
    slots: Vec<Option<Slot<T>>>,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(config: AdamWConfig) -> Self {
        AdamW { config, slots: Vec::new() }
    }

    /// Number of updates applied so far to parameter `index`.
    pub fn steps(&self, index: usize) -> u32 {
        self.slots.get(index).and_then(|s| s.as_ref()).map_or(0, |s| s.steps)
    }

    /// One update of `param` in place. `decay` selects whether decoupled
    /// weight decay applies to this tensor.
    pub fn step(&mut self, index: usize, param: &mut Tensor<T>, grad: &[T], lr: f64, decay: bool) -> Result<()> {
        if grad.len() != param.len() {
            return Err(Error::shape("adamw grad", param.shape(), &[grad.len()]));
        }
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::non_finite("optimizer gradient"));
        }
        if self.slots.len() <= index {
            self.slots.resize_with(index + 1, || None);
        }
        let slot = self.slots[index].get_or_insert_with(|| Slot {
            m: alloc::vec![T::zero(); grad.len()],
            v: alloc::vec![T::zero(); grad.len()],
            steps: 0,
        });
        if slot.m.len() != grad.len() {
            return Err(Error::shape("adamw state", &[slot.m.len()], &[grad.len()]));
        }
        slot.steps += 1;
        let cfg = self.config;
        let b1: T = c(cfg.beta1);
        let b2: T = c(cfg.beta2);
        let one_b1 = T::one() - b1;
        let one_b2 = T::one() - b2;
        let bc1: T = c(1.0 - libm::pow(cfg.beta1, slot.steps as f64));
        let bc2: T = c(1.0 - libm::pow(cfg.beta2, slot.steps as f64));
        let lr_t: T = c(lr);
        let eps: T = c(cfg.eps);
        let shrink: T = if decay { c(1.0 - lr * cfg.weight_decay) } else { T::one() };
        for (((p, &g), m), v) in param
            .data_mut()
            .iter_mut()
            .zip(grad)
            .zip(slot.m.iter_mut())
            .zip(slot.v.iter_mut())
        {
            *m = b1 * *m + one_b1 * g;
            *v = b2 * *v + one_b2 * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            *p = *p * shrink - lr_t * m_hat / (v_hat.sqrt() + eps);
        }
        Ok(())
    }
}

/// Linear warmup over `warmup` steps to `base`, then cosine decay to zero
/// at `total`.
pub fn warmup_cosine_lr(base: f64, step: usize, total: usize, warmup: usize) -> f64 {
    if step < warmup {
        return base * (step + 1) as f64 / warmup as f64;
    }
    let span = total.saturating_sub(warmup).max(1);
    let progress = ((step - warmup) as f64 / span as f64).min(1.0);
    base * 0.5 * (1.0 + libm::cos(core::f64::consts::PI * progress))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn param(v: &[f64]) -> Tensor<f64> {
        Tensor::new(&[v.len()], v.to_vec()).unwrap()
    }

    #[test]
    fn zero_grad_no_decay_is_identity() {
        let mut opt = AdamW::new(AdamWConfig::default());
        let mut p = param(&[1.0, -2.0, 3.5]);
        opt.step(0, &mut p, &[0.0; 3], 0.1, true).unwrap();
        assert_eq!(p.data(), &[1.0, -2.0, 3.5]);
    }

    #[test]
    fn zero_grad_decay_scales() {
        let mut opt = AdamW::new(AdamWConfig {
            weight_decay: 0.5,
            ..AdamWConfig::default()
        });
        let mut p = param(&[2.0, -4.0]);
        opt.step(0, &mut p, &[0.0; 2], 0.1, true).unwrap();
        assert_eq!(p.data(), &[2.0 * 0.95, -4.0 * 0.95]);
    }

    #[test]
    fn first_step_matches_hand_formula() {
        // m = 0.1, v = 0.001; bias correction restores 1 and 1.
        let mut opt = AdamW::new(AdamWConfig::default());
        let mut p = param(&[0.0]);
        opt.step(0, &mut p, &[1.0], 0.1, true).unwrap();
        let expected = -0.1 * 1.0 / (1.0 + 1e-8);
        assert!((p.data()[0] - expected).abs() < 1e-12, "{}", p.data()[0]);
    }

    #[test]
    fn second_step_matches_hand_formula() {
        let mut opt = AdamW::new(AdamWConfig::default());
        let mut p = param(&[0.0]);
        opt.step(0, &mut p, &[1.0], 0.1, false).unwrap();
        opt.step(0, &mut p, &[-1.0], 0.1, false).unwrap();
        let m = 0.9 * 0.1 - 0.1;
        let v = 0.999 * 0.001 + 0.001;
        let m_hat = m / (1.0 - 0.81);
        let v_hat = v / (1.0 - 0.999f64 * 0.999);
        let expected = -0.1 / (1.0 + 1e-8) - 0.1 * m_hat / (v_hat.sqrt() + 1e-8);
        assert!((p.data()[0] - expected).abs() < 1e-12);
        assert_eq!(opt.steps(0), 2);
        assert_eq!(opt.steps(5), 0);
    }

    #[test]
    fn rejects_non_finite_grad() {
        let mut opt = AdamW::new(AdamWConfig::default());
        let mut p = param(&[0.0]);
        assert!(opt.step(0, &mut p, &[f64::NAN], 0.1, true).is_err());
    }

    #[test]
    fn lr_curve() {
        assert_eq!(warmup_cosine_lr(1.0, 0, 100, 10), 0.1);
        assert_eq!(warmup_cosine_lr(1.0, 9, 100, 10), 1.0);
        assert_eq!(warmup_cosine_lr(1.0, 10, 100, 10), 1.0);
        assert!((warmup_cosine_lr(1.0, 55, 100, 10) - 0.5).abs() < 1e-12);
        assert!(warmup_cosine_lr(1.0, 99, 100, 10) < 0.01);
        assert_eq!(warmup_cosine_lr(2.0, 0, 10, 0), 2.0);
    }
}
