//! Quantization-error and sample-quality measurement.

use serde::{Deserialize, Serialize};

use crate::calibration::CalibSample;
use crate::diffusion::{
    ddim_sample, denoise_with_activations, DenoiserParams, NoiseSchedule, QuantContext,
    ToyDataset,
};
use crate::error::{Error, Result};
use crate::groupsearch::GroupAssignment;
use crate::numerics::rng::Rng;
use crate::numerics::Tensor;
use crate::quantizer::{quantize, Bitwidth, LayerQuantTable};

pub const METRICS_SCHEMA_VERSION: &str = "1";

/// Evaluation summary written as pretty-printed JSON.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MetricsReport {
    pub schema_version: String,
    /// Mean per-(sample, site) activation quantization MSE on the stored
    /// calibration set.
    pub c_error: f64,
    /// Same measure on latents recorded from fresh generation trajectories.
    pub g_error: f64,
    /// Unbiased squared kernel MMD between generated samples and dataset
    /// reference points.
    pub mmd2: f64,
    /// Mean importance-weight entropy per search epoch.
    pub entropy_per_epoch: Vec<f64>,
    pub config_echo: serde_json::Value,
}

/// Borrowed view of a quantized model for evaluation.
#[derive(Clone, Copy)]
pub struct QuantModelView<'a> {
    /// Parameters with statically quantized weights.
    pub params: &'a DenoiserParams,
    pub act_bits: Bitwidth,
    pub tables: &'a [LayerQuantTable],
    pub assignment: &'a GroupAssignment,
}

impl<'a> QuantModelView<'a> {
    pub fn context(&self) -> QuantContext<'a> {
        QuantContext {
            act_bits: self.act_bits,
            tables: self.tables,
            assignment: self.assignment,
        }
    }
}

/// Mean over samples and quantized activation sites of
/// `||a_fp - quantize(a_fp)||^2 / n_elements`, with the quantizer group
/// assigned by each sample's timestep.
pub fn quant_error(
    fp_model: &DenoiserParams,
    view: &QuantModelView<'_>,
    samples: &[(Tensor, usize)],
) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Config("quant_error needs at least one sample".into()));
    }
    let ctx = view.context();
    let mut total = 0.0;
    let mut pairs = 0usize;
    for (x, t) in samples {
        let rows = x.shape()[0];
        let (_, acts) = denoise_with_activations(fp_model, x, *t)?;
        for (site_idx, a) in acts.iter().enumerate() {
            let layer = site_idx + 1;
            match ctx.site_quantizer(layer, *t)? {
                None => {
                    pairs += rows;
                }
                Some(q) => {
                    let aq = quantize(a, &q);
                    let width = a.shape()[1] as f64;
                    let mut row_sq = vec![0.0; rows];
                    for (i, (av, bv)) in a.data().iter().zip(aq.data()).enumerate() {
                        row_sq[i / a.shape()[1]] += (av - bv) * (av - bv);
                    }
                    total += row_sq.iter().map(|s| s / width).sum::<f64>();
                    pairs += rows;
                }
            }
        }
    }
    Ok(total / pairs as f64)
}

/// Bandwidth for the RBF kernel.
#[derive(Clone, Copy, Debug)]
pub enum Bandwidth {
    /// Median pairwise distance of the pooled samples.
    Median,
    Fixed(f64),
}

/// Unbiased squared maximum mean discrepancy with an RBF kernel
/// `k(a, b) = exp(-||a - b||^2 / (2 bw^2))`.
pub fn mmd2_unbiased(x: &Tensor, y: &Tensor, bandwidth: Bandwidth) -> Result<f64> {
    let (n, d) = dims2(x)?;
    let (m, d2) = dims2(y)?;
    if d != d2 {
        return Err(Error::Shape(format!("point dims differ: {d} vs {d2}")));
    }
    if n < 2 || m < 2 {
        return Err(Error::Config(format!(
            "mmd2 needs n, m >= 2, got {n} and {m}"
        )));
    }
    let bw = match bandwidth {
        Bandwidth::Fixed(b) if b > 0.0 => b,
        Bandwidth::Fixed(b) => {
            return Err(Error::Domain(format!("bandwidth must be positive, got {b}")))
        }
        Bandwidth::Median => median_pairwise_distance(x, y)?,
    };
    let gamma = 1.0 / (2.0 * bw * bw);
    let xd = x.data();
    let yd = y.data();
    let sq = |a: &[f64], i: usize, b: &[f64], j: usize| -> f64 {
        let mut s = 0.0;
        for k in 0..d {
            let diff = a[i * d + k] - b[j * d + k];
            s += diff * diff;
        }
        s
    };
    let mut kxx = 0.0;
    for i in 0..n {
        for j in (i + 1)..n {
            kxx += (-gamma * sq(xd, i, xd, j)).exp();
        }
    }
    let mut kyy = 0.0;
    for i in 0..m {
        for j in (i + 1)..m {
            kyy += (-gamma * sq(yd, i, yd, j)).exp();
        }
    }
    let mut kxy = 0.0;
    for i in 0..n {
        for j in 0..m {
            kxy += (-gamma * sq(xd, i, yd, j)).exp();
        }
    }
    let nf = n as f64;
    let mf = m as f64;
    Ok(2.0 * kxx / (nf * (nf - 1.0)) + 2.0 * kyy / (mf * (mf - 1.0))
        - 2.0 * kxy / (nf * mf))
}

fn dims2(t: &Tensor) -> Result<(usize, usize)> {
    match t.shape() {
        [n, d] => Ok((*n, *d)),
        s => Err(Error::Shape(format!("expected [n, d] points, got {s:?}"))),
    }
}

/// Median Euclidean distance over all pooled pairs, computed on squared
/// distances and rooted at the end.
fn median_pairwise_distance(x: &Tensor, y: &Tensor) -> Result<f64> {
    let (_, d) = dims2(x)?;
    let mut pooled = x.data().to_vec();
    pooled.extend_from_slice(y.data());
    let n = pooled.len() / d;
    let mut sq = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        for j in (i + 1)..n {
            let mut s = 0.0;
            for k in 0..d {
                let diff = pooled[i * d + k] - pooled[j * d + k];
                s += diff * diff;
            }
            sq.push(s);
        }
    }
    let mid = sq.len() / 2;
    let median_sq = if sq.len() % 2 == 1 {
        *sq.select_nth_unstable_by(mid, f64::total_cmp).1
    } else {
        let hi = *sq.select_nth_unstable_by(mid, f64::total_cmp).1;
        let lo = *sq[..mid].select_nth_unstable_by(mid - 1, f64::total_cmp).1;
        0.5 * (lo + hi)
    };
    let bw = median_sq.sqrt();
    if bw <= 0.0 {
        return Err(Error::Domain(
            "median pairwise distance is zero; bandwidth undefined".into(),
        ));
    }
    Ok(bw)
}

/// Generate with the quantized model, then score it: kernel MMD against
/// dataset reference points, C-Error on the calibration set, and G-Error on
/// latents recorded every T/10 timesteps of the same generation run.
#[allow(clippy::too_many_arguments)]
pub fn evaluate(
    fp_model: &DenoiserParams,
    view: &QuantModelView<'_>,
    calib_samples: &[CalibSample],
    dataset: &ToyDataset,
    sched: &NoiseSchedule,
    n_samples: usize,
    rng: &mut Rng,
    entropy_per_epoch: Vec<f64>,
    config_echo: serde_json::Value,
) -> Result<MetricsReport> {
    let record = record_stride_timesteps(sched.timesteps);
    let ctx = view.context();
    let (samples, latents) =
        ddim_sample(view.params, sched, n_samples, rng, Some(&ctx), &record)?;

    // Balance the two-sample test: as many reference points as samples.
    let d = dataset.points.shape()[1];
    let n_ref = dataset.len().min(n_samples);
    let reference = Tensor::new(
        vec![n_ref, d],
        dataset.points.data()[..n_ref * d].to_vec(),
    )?;
    let mmd2 = mmd2_unbiased(&samples, &reference, Bandwidth::Median)?;

    let c_samples = group_calib_samples(calib_samples, d)?;
    let c_error = quant_error(fp_model, view, &c_samples)?;
    let g_samples: Vec<(Tensor, usize)> =
        latents.into_iter().map(|(t, x)| (x, t)).collect();
    let g_error = quant_error(fp_model, view, &g_samples)?;

    Ok(MetricsReport {
        schema_version: METRICS_SCHEMA_VERSION.to_string(),
        c_error,
        g_error,
        mmd2,
        entropy_per_epoch,
        config_echo,
    })
}

/// Timesteps recorded for G-Error: every T/10-th step.
pub fn record_stride_timesteps(t_max: usize) -> Vec<usize> {
    let stride = (t_max / 10).max(1);
    (1..=t_max / stride).map(|k| k * stride).collect()
}

/// Calibration samples regrouped as per-timestep batches.
pub fn group_calib_samples(samples: &[CalibSample], d: usize) -> Result<Vec<(Tensor, usize)>> {
    if samples.is_empty() {
        return Err(Error::Config("empty calibration set".into()));
    }
    let mut by_t: std::collections::BTreeMap<usize, Vec<f64>> = std::collections::BTreeMap::new();
    for s in samples {
        by_t.entry(s.t).or_default().extend_from_slice(&s.x);
    }
    by_t.into_iter()
        .map(|(t, data)| {
            let n = data.len() / d;
            Ok((Tensor::new(vec![n, d], data)?, t))
        })
        .collect()
}
