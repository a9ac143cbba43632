//! Gradient descent with adaptive moments (Adam).

use crate::error::{Error, Result};
use crate::numerics::tensor::Tensor;

#[derive(Clone, Copy, Debug)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam state over a fixed list of parameter slots. The caller passes the
/// learning rate per step, which lets schedules live outside the optimizer.
pub struct Adam {
    cfg: AdamConfig,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: u64,
}

impl Adam {
    pub fn new(cfg: AdamConfig, sizes: &[usize]) -> Self {
        Self {
            cfg,
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One update over all slots. `params[i]` is replaced by its updated
    /// value; `grads[i]` must have the same element count.
    pub fn step(&mut self, lr: f64, params: &mut [Tensor], grads: &[Tensor]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::Shape(format!(
                "adam expects {} slots, got {} params / {} grads",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.cfg.beta1.powi(t);
        let bc2 = 1.0 - self.cfg.beta2.powi(t);
        for (slot, (p, g)) in params.iter_mut().zip(grads.iter()).enumerate() {
            if p.numel() != self.m[slot].len() || g.numel() != self.m[slot].len() {
                return Err(Error::Shape(format!(
                    "adam slot {slot}: size mismatch ({} stored, {} param, {} grad)",
                    self.m[slot].len(),
                    p.numel(),
                    g.numel()
                )));
            }
            let m = &mut self.m[slot];
            let v = &mut self.v[slot];
            let mut out = p.data().to_vec();
            for ((pv, &gv), (mi, vi)) in out
                .iter_mut()
                .zip(g.data())
                .zip(m.iter_mut().zip(v.iter_mut()))
            {
                *mi = self.cfg.beta1 * *mi + (1.0 - self.cfg.beta1) * gv;
                *vi = self.cfg.beta2 * *vi + (1.0 - self.cfg.beta2) * gv * gv;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *pv -= lr * mhat / (vhat.sqrt() + self.cfg.eps);
            }
            *p = Tensor::new(p.shape().to_vec(), out)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_lr_leaves_params_unchanged() {
        let mut adam = Adam::new(AdamConfig::default(), &[2]);
        let mut params = vec![Tensor::from_slice(&[1.0, -2.0])];
        let grads = vec![Tensor::from_slice(&[0.3, 0.7])];
        adam.step(0.0, &mut params, &grads).unwrap();
        assert_eq!(params[0].data(), &[1.0, -2.0]);
    }

    #[test]
    fn descends_a_quadratic() {
        // f(x) = x^2, gradient 2x; Adam should walk toward 0.
        let mut adam = Adam::new(AdamConfig::default(), &[1]);
        let mut params = vec![Tensor::scalar(3.0)];
        for _ in 0..500 {
            let x = params[0].item();
            let grads = vec![Tensor::scalar(2.0 * x)];
            adam.step(0.05, &mut params, &grads).unwrap();
        }
        assert!(params[0].item().abs() < 0.05);
    }

    #[test]
    fn zero_gradient_zero_state_is_a_fixed_point() {
        let mut adam = Adam::new(AdamConfig::default(), &[1]);
        let mut params = vec![Tensor::scalar(1.25)];
        for _ in 0..3 {
            adam.step(0.1, &mut params, &[Tensor::scalar(0.0)]).unwrap();
        }
        assert_eq!(params[0].item(), 1.25);
    }
}
