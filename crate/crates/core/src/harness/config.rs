//! Experiment configuration.
//!
//! Flat TOML, every key optional. Defaults: T=100, 8 groups, lambda 0.8,
//! eta 1.5, calibration set 1024 built in batches of 64, 10 search epochs,
//! W8A8.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::calibration::{CalibConfig, Strategy};
use crate::diffusion::{default_schedule, Architecture, NoiseSchedule, PretrainConfig};
use crate::error::{Error, Result};
use crate::quantizer::Bitwidth;

/// RNG stream ids per pipeline stage, so a stage's draws do not depend on
/// how much randomness other stages consumed.
pub mod streams {
    pub const DATASET: u64 = 1;
    pub const PRETRAIN: u64 = 2;
    pub const CALIBRATE: u64 = 3;
    pub const EVAL: u64 = 4;
    pub const SAMPLE: u64 = 5;
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: String,
    pub timesteps: usize,
    pub weight_bits: Bitwidth,
    pub act_bits: Bitwidth,
    pub groups: usize,
    pub lambda: f64,
    pub eta: f64,
    pub calib_size: usize,
    pub batch_size: usize,
    pub epochs: usize,
    pub strategy: Strategy,
    pub seed: u64,
    pub out_dir: PathBuf,

    pub train_points: usize,
    pub pretrain_epochs: usize,
    pub pretrain_batch: usize,
    pub pretrain_lr: f64,

    /// Search learning rate; when absent, 5e-3 for 8-bit activations and
    /// above, 3e-3 below.
    pub search_lr: Option<f64>,
    pub search_lr_end: f64,
    pub lp_exponent: f64,
    pub eval_samples: usize,

    pub hidden_width: usize,
    pub hidden_layers: usize,
    pub time_embed_dim: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            dataset: "gaussian-ring".into(),
            timesteps: 100,
            weight_bits: Bitwidth::Bits(8),
            act_bits: Bitwidth::Bits(8),
            groups: 8,
            lambda: 0.8,
            eta: 1.5,
            calib_size: 1024,
            batch_size: 64,
            epochs: 10,
            strategy: Strategy::Active,
            seed: 0,
            out_dir: PathBuf::from("runs"),

            train_points: 8000,
            pretrain_epochs: 200,
            pretrain_batch: 256,
            pretrain_lr: 1e-3,

            search_lr: None,
            search_lr_end: 1e-5,
            lp_exponent: 2.4,
            eval_samples: 2000,

            hidden_width: 128,
            hidden_layers: 3,
            time_embed_dim: 32,
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig =
            toml::from_str(text).map_err(|e| Error::Config(format!("bad config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.groups == 0 {
            return Err(Error::Config("groups must be >= 1".into()));
        }
        if self.calib_size == 0 || self.batch_size == 0 {
            return Err(Error::Config("calibration sizes must be >= 1".into()));
        }
        if self.train_points == 0 {
            return Err(Error::Config("train_points must be >= 1".into()));
        }
        self.architecture().validate()
    }

    pub fn architecture(&self) -> Architecture {
        Architecture {
            input_dim: 2,
            time_embed_dim: self.time_embed_dim,
            hidden: vec![self.hidden_width; self.hidden_layers],
        }
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        default_schedule(self.timesteps)
    }

    pub fn pretrain_config(&self) -> PretrainConfig {
        PretrainConfig {
            epochs: self.pretrain_epochs,
            batch_size: self.pretrain_batch,
            lr: self.pretrain_lr,
        }
    }

    pub fn calib_config(&self) -> CalibConfig {
        CalibConfig {
            group_count: self.groups,
            lambda: self.lambda,
            eta: self.eta,
            calib_size: self.calib_size,
            batch_size: self.batch_size,
            epochs: self.epochs,
            strategy: self.strategy,
            weight_bits: self.weight_bits,
            act_bits: self.act_bits,
            lp_exponent: self.lp_exponent,
            lr_start: self
                .search_lr
                .unwrap_or_else(|| CalibConfig::default_lr(self.act_bits)),
            lr_end: self.search_lr_end,
        }
    }

    /// "W8A8"-style label.
    pub fn bitwidth_label(&self) -> String {
        format!("W{}A{}", self.weight_bits, self.act_bits)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_protocol() {
        let c = ExperimentConfig::default();
        assert_eq!(c.timesteps, 100);
        assert_eq!(c.groups, 8);
        assert_eq!(c.lambda, 0.8);
        assert_eq!(c.eta, 1.5);
        assert_eq!(c.calib_size, 1024);
        assert_eq!(c.batch_size, 64);
        assert_eq!(c.epochs, 10);
        assert_eq!(c.weight_bits, Bitwidth::Bits(8));
        assert_eq!(c.act_bits, Bitwidth::Bits(8));
        assert_eq!(c.calib_config().lr_start, 5e-3);
        assert_eq!(c.calib_config().lr_end, 1e-5);
    }

    #[test]
    fn parse_overrides_and_rejects_unknown_keys() {
        let c = ExperimentConfig::parse(
            "groups = 4\nact_bits = 6\nweight_bits = 6\nstrategy = \"random\"\nseed = 9\n",
        )
        .unwrap();
        assert_eq!(c.groups, 4);
        assert_eq!(c.act_bits, Bitwidth::Bits(6));
        assert_eq!(c.strategy, Strategy::Random);
        assert_eq!(c.seed, 9);
        assert_eq!(c.calib_config().lr_start, 3e-3);
        assert!(ExperimentConfig::parse("grops = 4\n").is_err());
    }

    #[test]
    fn full_sentinel_parses() {
        let c = ExperimentConfig::parse("act_bits = \"full\"\n").unwrap();
        assert_eq!(c.act_bits, Bitwidth::Full);
        assert_eq!(c.bitwidth_label(), "W8Afull");
    }

    #[test]
    fn toml_roundtrip_preserves_config() {
        let c = ExperimentConfig::default();
        let text = toml::to_string(&c).unwrap();
        let back = ExperimentConfig::parse(&text).unwrap();
        assert_eq!(back, c);
    }
}
