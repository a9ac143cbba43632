//! Deterministic DDIM sampling.

use std::collections::BTreeSet;

use crate::diffusion::model::{denoise, DenoiserParams, QuantContext};
use crate::diffusion::schedule::NoiseSchedule;
use crate::error::{Error, Result};
use crate::numerics::rng::{normal_vec, Rng};
use crate::numerics::Tensor;

/// Latents captured during sampling, one entry per requested timestep in
/// descending-t order. The tensor is the latent *at* noise level t.
pub type RecordedLatents = Vec<(usize, Tensor)>;

/// Generate `n` samples by the deterministic update
/// `x_{t-1} = sqrt(abar_{t-1}) * x0_hat + sqrt(1 - abar_{t-1}) * eps_theta`
/// with `x0_hat = (x_t - sqrt(1 - abar_t) * eps_theta) / sqrt(abar_t)`,
/// starting from x_T ~ N(0, I). Latents are recorded at the timesteps listed
/// in `record`.
pub fn ddim_sample(
    params: &DenoiserParams,
    sched: &NoiseSchedule,
    n: usize,
    rng: &mut Rng,
    ctx: Option<&QuantContext<'_>>,
    record: &[usize],
) -> Result<(Tensor, RecordedLatents)> {
    if n == 0 {
        return Err(Error::Config("need n >= 1 samples".into()));
    }
    let d = params.arch.input_dim;
    let record: BTreeSet<usize> = record.iter().copied().collect();
    if let Some(&t) = record.iter().find(|&&t| t < 1 || t > sched.timesteps) {
        return Err(Error::Domain(format!("recorded timestep {t} out of range")));
    }
    let mut x = Tensor::new(vec![n, d], normal_vec(rng, n * d))?;
    let mut recorded = Vec::with_capacity(record.len());
    for t in (1..=sched.timesteps).rev() {
        if record.contains(&t) {
            recorded.push((t, x.clone()));
        }
        let eps = denoise(params, &x, t, ctx)?;
        let ab = sched.alpha_bar(t);
        let ab_prev = sched.alpha_bar_prev(t);
        // x0_hat = (x - sqrt(1-ab) eps) / sqrt(ab)
        let x0 = x
            .sub(&eps.scale((1.0 - ab).sqrt()))?
            .scale(1.0 / ab.sqrt());
        x = x0
            .scale(ab_prev.sqrt())
            .add(&eps.scale((1.0 - ab_prev).sqrt()))?;
    }
    Ok((x, recorded))
}

/// Sample while stopping at timestep `t_stop`, returning the latent x_{t_stop}
/// (the chain state still carrying that noise level). `t_stop = T` returns
/// the initial Gaussian draws.
pub fn ddim_sample_until(
    params: &DenoiserParams,
    sched: &NoiseSchedule,
    n: usize,
    t_stop: usize,
    rng: &mut Rng,
) -> Result<Tensor> {
    sched.check_t(t_stop)?;
    let (_, mut recorded) = ddim_sample_partial(params, sched, n, t_stop, rng)?;
    Ok(recorded.pop().expect("latent at t_stop").1)
}

fn ddim_sample_partial(
    params: &DenoiserParams,
    sched: &NoiseSchedule,
    n: usize,
    t_stop: usize,
    rng: &mut Rng,
) -> Result<(Tensor, RecordedLatents)> {
    if n == 0 {
        return Err(Error::Config("need n >= 1 samples".into()));
    }
    let d = params.arch.input_dim;
    let mut x = Tensor::new(vec![n, d], normal_vec(rng, n * d))?;
    for t in ((t_stop + 1)..=sched.timesteps).rev() {
        let eps = denoise(params, &x, t, None)?;
        let ab = sched.alpha_bar(t);
        let ab_prev = sched.alpha_bar_prev(t);
        let x0 = x
            .sub(&eps.scale((1.0 - ab).sqrt()))?
            .scale(1.0 / ab.sqrt());
        x = x0
            .scale(ab_prev.sqrt())
            .add(&eps.scale((1.0 - ab_prev).sqrt()))?;
    }
    Ok((x.clone(), vec![(t_stop, x)]))
}
