//! Variance schedule and forward noising.

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Per-timestep noise tables. Timesteps are 1-indexed: `beta[t-1]` and
/// `alpha_bar[t-1]` belong to step `t`, with `alpha_bar` the running product
/// of `1 - beta` (strictly decreasing).
#[derive(Clone, Debug)]
pub struct NoiseSchedule {
    pub timesteps: usize,
    pub beta: Vec<f64>,
    pub alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    pub fn beta(&self, t: usize) -> f64 {
        self.beta[t - 1]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t - 1]
    }

    /// `alpha_bar` of the previous step, 1 at the start of the chain.
    pub fn alpha_bar_prev(&self, t: usize) -> f64 {
        if t <= 1 {
            1.0
        } else {
            self.alpha_bar[t - 2]
        }
    }

    pub fn check_t(&self, t: usize) -> Result<()> {
        if t < 1 || t > self.timesteps {
            return Err(Error::Domain(format!(
                "timestep {t} outside [1, {}]",
                self.timesteps
            )));
        }
        Ok(())
    }
}

/// Linear beta schedule from `beta_start` to `beta_end` over `t` steps.
pub fn make_schedule(t: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
    if t < 2 {
        return Err(Error::Config(format!("need at least 2 timesteps, got {t}")));
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(Error::Config(format!(
            "betas must satisfy 0 < start <= end < 1, got ({beta_start}, {beta_end})"
        )));
    }
    let mut beta = Vec::with_capacity(t);
    let mut alpha_bar = Vec::with_capacity(t);
    let mut prod = 1.0;
    for i in 0..t {
        let b = beta_start + (beta_end - beta_start) * i as f64 / (t - 1) as f64;
        prod *= 1.0 - b;
        beta.push(b);
        alpha_bar.push(prod);
    }
    Ok(NoiseSchedule {
        timesteps: t,
        beta,
        alpha_bar,
    })
}

/// Standard linear schedule (1e-4 to 0.02 at 1000 steps) rescaled to `t`
/// steps so the total injected noise stays comparable.
pub fn default_schedule(t: usize) -> Result<NoiseSchedule> {
    let factor = 1000.0 / t as f64;
    make_schedule(t, 1e-4 * factor, 0.02 * factor)
}

/// `sqrt(alpha_bar[t]) * x0 + sqrt(1 - alpha_bar[t]) * eps`.
pub fn forward_noise(
    x0: &Tensor,
    t: usize,
    eps: &Tensor,
    sched: &NoiseSchedule,
) -> Result<Tensor> {
    sched.check_t(t)?;
    if x0.shape() != eps.shape() {
        return Err(Error::Shape(format!(
            "x0 shape {:?} != eps shape {:?}",
            x0.shape(),
            eps.shape()
        )));
    }
    let ab = sched.alpha_bar(t);
    x0.scale(ab.sqrt()).add(&eps.scale((1.0 - ab).sqrt()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::rng::{normal_vec, seed_rng};

    #[test]
    fn two_step_schedule_products() {
        let s = make_schedule(2, 0.1, 0.2).unwrap();
        assert!((s.alpha_bar(1) - 0.9).abs() < 1e-15);
        assert!((s.alpha_bar(2) - 0.72).abs() < 1e-15);
    }

    #[test]
    fn constant_schedule_is_geometric() {
        let s = make_schedule(1000, 0.01, 0.01).unwrap();
        for &t in &[1usize, 10, 500, 1000] {
            assert!((s.alpha_bar(t) - 0.99f64.powi(t as i32)).abs() < 1e-9);
        }
    }

    #[test]
    fn invalid_bounds_error() {
        assert!(make_schedule(10, 0.1, 1.0).is_err());
        assert!(make_schedule(10, 0.0, 0.5).is_err());
        assert!(make_schedule(1, 0.1, 0.2).is_err());
    }

    #[test]
    fn alpha_bar_strictly_decreasing() {
        let s = default_schedule(100).unwrap();
        for t in 2..=100 {
            assert!(s.alpha_bar(t) < s.alpha_bar(t - 1));
        }
        assert!(s.alpha_bar(100) < s.alpha_bar(1));
    }

    #[test]
    fn forward_noise_examples() {
        let s = make_schedule(2, 0.1, 0.2).unwrap();
        let one = Tensor::scalar(1.0);
        let zero = Tensor::scalar(0.0);
        let a = forward_noise(&one, 2, &zero, &s).unwrap().item();
        assert!((a - 0.72f64.sqrt()).abs() < 1e-12);
        let b = forward_noise(&zero, 2, &one, &s).unwrap().item();
        assert!((b - 0.28f64.sqrt()).abs() < 1e-12);
        assert!(forward_noise(&one, 3, &zero, &s).is_err());
    }

    #[test]
    fn forward_noise_identity_at_unit_alpha_bar() {
        // Degenerate table built directly; make_schedule cannot produce it.
        let s = NoiseSchedule {
            timesteps: 1,
            beta: vec![0.0],
            alpha_bar: vec![1.0],
        };
        let x0 = Tensor::from_slice(&[0.3, -1.7]);
        let eps = Tensor::from_slice(&[5.0, 5.0]);
        let out = forward_noise(&x0, 1, &eps, &s).unwrap();
        assert_eq!(out.data(), x0.data());
    }

    #[test]
    fn forward_noise_variance_law() {
        // For x0 = 0 the output variance must be 1 - alpha_bar within 5%.
        let s = default_schedule(100).unwrap();
        let t = 40;
        let n = 100_000;
        let x0 = Tensor::zeros(vec![n, 1]);
        let eps = Tensor::new(vec![n, 1], normal_vec(&mut seed_rng(8), n)).unwrap();
        let out = forward_noise(&x0, t, &eps, &s).unwrap();
        let var = out.data().iter().map(|v| v * v).sum::<f64>() / n as f64;
        let want = 1.0 - s.alpha_bar(t);
        assert!((var - want).abs() / want < 0.05, "var {var} vs {want}");
    }
}
