//! Experiment orchestration: pretrain, calibrate, evaluate, ablate.

use serde::{Deserialize, Serialize};

use crate::calibration::{run_calibration, CalibrationLogs, Strategy};
use crate::diffusion::{ddim_sample, make_toy_dataset, pretrain, ToyDataset};
use crate::error::{Error, Result};
use crate::groupsearch::GroupAssignment;
use crate::harness::checkpoint::{Checkpoint, QuantExtras};
use crate::harness::config::{streams, ExperimentConfig};
use crate::metrics::{evaluate, MetricsReport, QuantModelView};
use crate::numerics::rng::stream_rng;
use crate::numerics::Tensor;
use crate::quantizer::Bitwidth;

/// Pretrain the full-precision denoiser and package it as a checkpoint.
pub fn run_train(cfg: &ExperimentConfig) -> Result<(Checkpoint, Vec<f64>)> {
    cfg.validate()?;
    let sched = cfg.schedule()?;
    let dataset = load_dataset(cfg)?;
    let mut rng = stream_rng(cfg.seed, streams::PRETRAIN);
    let (params, losses) = pretrain(
        &cfg.pretrain_config(),
        cfg.architecture(),
        &dataset,
        &sched,
        &mut rng,
    )?;
    Ok((Checkpoint::from_params(&params, None, cfg, cfg.seed), losses))
}

pub fn load_dataset(cfg: &ExperimentConfig) -> Result<ToyDataset> {
    make_toy_dataset(
        &cfg.dataset,
        cfg.train_points,
        &mut stream_rng(cfg.seed, streams::DATASET),
    )
}

/// Calibrate + search against a pretrained checkpoint and package the
/// quantized bundle.
pub fn run_calibrate(
    cfg: &ExperimentConfig,
    fp: &Checkpoint,
) -> Result<(Checkpoint, CalibrationLogs)> {
    cfg.validate()?;
    if fp.architecture != cfg.architecture() {
        return Err(Error::Config(
            "checkpoint architecture differs from the config".into(),
        ));
    }
    let teacher = fp.params()?;
    let sched = cfg.schedule()?;
    let mut rng = stream_rng(cfg.seed, streams::CALIBRATE);
    let outcome = run_calibration(&teacher, &sched, &cfg.calib_config(), &mut rng)?;
    let extras = QuantExtras {
        weight_bits: cfg.weight_bits,
        act_bits: cfg.act_bits,
        weight_params: outcome.weight_params,
        tables: outcome.tables,
        assignment: outcome.assignment,
        calib_samples: outcome.calib.samples.clone(),
        entropy_per_epoch: outcome.logs.entropy_per_epoch.clone(),
        max_sigma_per_epoch: outcome.logs.max_sigma_per_epoch.clone(),
    };
    let bundle = Checkpoint::from_params(&outcome.student, Some(extras), cfg, cfg.seed);
    Ok((bundle, outcome.logs))
}

/// Score a quantized bundle against its full-precision teacher.
pub fn run_eval(fp: &Checkpoint, bundle: &Checkpoint) -> Result<MetricsReport> {
    let cfg = &bundle.config_echo;
    let teacher = fp.params()?;
    let student = bundle.params()?;
    let extras = bundle.quant.as_ref().ok_or_else(|| {
        Error::Config("bundle carries no quantization data; run calibrate first".into())
    })?;
    let sched = cfg.schedule()?;
    let dataset = load_dataset(cfg)?;
    let view = QuantModelView {
        params: &student,
        act_bits: extras.act_bits,
        tables: &extras.tables,
        assignment: &extras.assignment,
    };
    let mut rng = stream_rng(cfg.seed, streams::EVAL);
    evaluate(
        &teacher,
        &view,
        &extras.calib_samples,
        &dataset,
        &sched,
        cfg.eval_samples,
        &mut rng,
        extras.entropy_per_epoch.clone(),
        serde_json::to_value(cfg).map_err(|e| Error::Config(e.to_string()))?,
    )
}

/// Generate samples from a checkpoint (quantized when it is a bundle).
pub fn run_sample(ckpt: &Checkpoint, n: usize, seed: Option<u64>) -> Result<Tensor> {
    let cfg = &ckpt.config_echo;
    let params = ckpt.params()?;
    let sched = cfg.schedule()?;
    let seed = seed.unwrap_or(cfg.seed);
    let mut rng = stream_rng(seed, streams::SAMPLE);
    let samples = match &ckpt.quant {
        None => ddim_sample(&params, &sched, n, &mut rng, None, &[])?.0,
        Some(extras) => {
            let view = QuantModelView {
                params: &params,
                act_bits: extras.act_bits,
                tables: &extras.tables,
                assignment: &extras.assignment,
            };
            ddim_sample(&params, &sched, n, &mut rng, Some(&view.context()), &[])?.0
        }
    };
    Ok(samples)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GroupAblationRow {
    pub bitwidth: String,
    pub groups: usize,
    pub c_error: f64,
    pub g_error: f64,
    pub mmd2: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GroupAblationReport {
    pub schema_version: String,
    pub seed: u64,
    pub config_echo: ExperimentConfig,
    pub rows: Vec<GroupAblationRow>,
}

/// Group-count ablation: G in {1, 4, 8, 16} at W8A8 and W6A6, all arms
/// sharing the same pretrained checkpoint and seed.
pub fn ablate_groups(cfg: &ExperimentConfig, fp: &Checkpoint) -> Result<GroupAblationReport> {
    let mut rows = Vec::new();
    for &bits in &[8u32, 6] {
        for &groups in &[1usize, 4, 8, 16] {
            let arm = ExperimentConfig {
                weight_bits: Bitwidth::Bits(bits),
                act_bits: Bitwidth::Bits(bits),
                groups,
                ..cfg.clone()
            };
            let (bundle, _) = run_calibrate(&arm, fp)?;
            let report = run_eval(fp, &bundle)?;
            rows.push(GroupAblationRow {
                bitwidth: arm.bitwidth_label(),
                groups,
                c_error: report.c_error,
                g_error: report.g_error,
                mmd2: report.mmd2,
            });
        }
    }
    Ok(GroupAblationReport {
        schema_version: "1".into(),
        seed: cfg.seed,
        config_echo: cfg.clone(),
        rows,
    })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct StrategyAblationRow {
    pub strategy: String,
    pub bitwidth: String,
    pub calib_size: usize,
    pub c_error: f64,
    pub g_error: f64,
    pub mmd2: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct StrategyAblationReport {
    pub schema_version: String,
    pub seed: u64,
    pub config_echo: ExperimentConfig,
    pub rows: Vec<StrategyAblationRow>,
}

/// Sampling-strategy ablation: {random, heuristic, active} across
/// calibration sizes {128, 256, 512, 1024} at the config's bitwidths.
pub fn ablate_strategy(
    cfg: &ExperimentConfig,
    fp: &Checkpoint,
) -> Result<StrategyAblationReport> {
    let mut rows = Vec::new();
    for strategy in [Strategy::Random, Strategy::Heuristic, Strategy::Active] {
        for &calib_size in &[128usize, 256, 512, 1024] {
            let arm = ExperimentConfig {
                strategy,
                calib_size,
                ..cfg.clone()
            };
            let (bundle, _) = run_calibrate(&arm, fp)?;
            let report = run_eval(fp, &bundle)?;
            rows.push(StrategyAblationRow {
                strategy: strategy.to_string(),
                bitwidth: arm.bitwidth_label(),
                calib_size,
                c_error: report.c_error,
                g_error: report.g_error,
                mmd2: report.mmd2,
            });
        }
    }
    Ok(StrategyAblationReport {
        schema_version: "1".into(),
        seed: cfg.seed,
        config_echo: cfg.clone(),
        rows,
    })
}

/// Full-precision baseline view of a pretrained checkpoint, evaluated with
/// the same machinery as a quantized bundle (identity quantizers).
pub fn fp_view_assignment(timesteps: usize) -> GroupAssignment {
    GroupAssignment::single(timesteps)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn micro_cfg() -> ExperimentConfig {
        ExperimentConfig {
            timesteps: 30,
            train_points: 256,
            pretrain_epochs: 2,
            pretrain_batch: 128,
            hidden_width: 16,
            hidden_layers: 2,
            time_embed_dim: 8,
            calib_size: 32,
            batch_size: 16,
            epochs: 1,
            groups: 2,
            eval_samples: 64,
            seed: 11,
            ..ExperimentConfig::default()
        }
    }

    #[test]
    fn train_calibrate_eval_roundtrip() {
        let cfg = micro_cfg();
        let (fp, losses) = run_train(&cfg).unwrap();
        assert_eq!(losses.len(), 2);
        let (bundle, logs) = run_calibrate(&cfg, &fp).unwrap();
        assert_eq!(bundle.quant.as_ref().unwrap().calib_samples.len(), 32);
        assert!(!logs.steps.is_empty());
        let report = run_eval(&fp, &bundle).unwrap();
        assert!(report.c_error >= 0.0 && report.g_error >= 0.0);
        assert!(report.mmd2.is_finite());
        let samples = run_sample(&bundle, 8, None).unwrap();
        assert_eq!(samples.shape(), &[8, 2]);
    }

    #[test]
    fn eval_rejects_plain_checkpoint_as_bundle() {
        let cfg = micro_cfg();
        let (fp, _) = run_train(&cfg).unwrap();
        assert!(run_eval(&fp, &fp).is_err());
    }

    #[test]
    fn determinism_same_seed_same_bundle() {
        let cfg = micro_cfg();
        let (fp, _) = run_train(&cfg).unwrap();
        let (b1, _) = run_calibrate(&cfg, &fp).unwrap();
        let (b2, _) = run_calibrate(&cfg, &fp).unwrap();
        let j1 = serde_json::to_string(&b1).unwrap();
        let j2 = serde_json::to_string(&b2).unwrap();
        assert_eq!(j1, j2);
    }
}
