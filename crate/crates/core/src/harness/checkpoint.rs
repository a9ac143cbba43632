//! Versioned JSON checkpoints.
//!
//! Field order is fixed by the struct definitions and floats use the
//! shortest round-trip encoding, so equal in-memory states serialize to
//! byte-identical files.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::calibration::CalibSample;
use crate::diffusion::{Architecture, DenoiserParams, LinearLayer};
use crate::error::{CheckpointError, Error, Result};
use crate::groupsearch::GroupAssignment;
use crate::harness::config::ExperimentConfig;
use crate::numerics::Tensor;
use crate::quantizer::{Bitwidth, LayerQuantTable, QuantParams};

pub const CHECKPOINT_SCHEMA_VERSION: &str = "1";

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// Quantization artifacts carried by a calibrated bundle.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct QuantExtras {
    pub weight_bits: Bitwidth,
    pub act_bits: Bitwidth,
    pub weight_params: Vec<Option<QuantParams>>,
    pub tables: Vec<LayerQuantTable>,
    pub assignment: GroupAssignment,
    /// The calibration set the bundle was fit on (C-Error is measured here).
    pub calib_samples: Vec<CalibSample>,
    pub entropy_per_epoch: Vec<f64>,
    pub max_sigma_per_epoch: Vec<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Checkpoint {
    pub schema_version: String,
    pub architecture: Architecture,
    pub tensors: Vec<NamedTensor>,
    pub quant: Option<QuantExtras>,
    pub config_echo: ExperimentConfig,
    pub seed: u64,
}

impl Checkpoint {
    pub fn from_params(
        params: &DenoiserParams,
        quant: Option<QuantExtras>,
        config: &ExperimentConfig,
        seed: u64,
    ) -> Self {
        let mut tensors = Vec::with_capacity(params.layers.len() * 2);
        for (i, layer) in params.layers.iter().enumerate() {
            tensors.push(NamedTensor {
                name: format!("layer{i}/weight"),
                shape: layer.weight.shape().to_vec(),
                data: layer.weight.data().to_vec(),
            });
            tensors.push(NamedTensor {
                name: format!("layer{i}/bias"),
                shape: layer.bias.shape().to_vec(),
                data: layer.bias.data().to_vec(),
            });
        }
        Self {
            schema_version: CHECKPOINT_SCHEMA_VERSION.to_string(),
            architecture: params.arch.clone(),
            tensors,
            quant,
            config_echo: config.clone(),
            seed,
        }
    }

    /// Reassemble the parameters, checking names and shapes.
    pub fn params(&self) -> Result<DenoiserParams> {
        let dims = self.architecture.layer_dims();
        if self.tensors.len() != 2 * dims.len() {
            return Err(CheckpointError::Malformed(format!(
                "expected {} tensors, found {}",
                2 * dims.len(),
                self.tensors.len()
            ))
            .into());
        }
        let mut layers = Vec::with_capacity(dims.len());
        for (i, &(fan_in, fan_out)) in dims.iter().enumerate() {
            let w = self.named(&format!("layer{i}/weight"))?;
            let b = self.named(&format!("layer{i}/bias"))?;
            if w.shape != [fan_in, fan_out] || b.shape != [1, fan_out] {
                return Err(CheckpointError::Malformed(format!(
                    "layer {i} shapes disagree with the architecture"
                ))
                .into());
            }
            layers.push(LinearLayer {
                weight: tensor_of(w)?,
                bias: tensor_of(b)?,
            });
        }
        Ok(DenoiserParams {
            arch: self.architecture.clone(),
            layers,
        })
    }

    fn named(&self, name: &str) -> Result<&NamedTensor> {
        self.tensors
            .iter()
            .find(|t| t.name == name)
            .ok_or_else(|| CheckpointError::Malformed(format!("missing tensor {name}")).into())
    }
}

fn tensor_of(nt: &NamedTensor) -> Result<Tensor> {
    let want: usize = nt.shape.iter().product();
    if want != nt.data.len() {
        return Err(CheckpointError::ShapeMismatch {
            name: nt.name.clone(),
            shape: nt.shape.clone(),
            len: nt.data.len(),
        }
        .into());
    }
    Tensor::new(nt.shape.clone(), nt.data.clone())
}

/// Pretty JSON with deterministic field order.
pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir)?;
        }
    }
    let body = serde_json::to_string_pretty(ckpt)
        .map_err(|e| Error::from(CheckpointError::Malformed(e.to_string())))?;
    std::fs::write(path, body)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let text = std::fs::read_to_string(path)?;
    // Version gate first, so a future-format file reports a version
    // mismatch rather than a parse error.
    let value: serde_json::Value = serde_json::from_str(&text)
        .map_err(|e| Error::from(CheckpointError::Malformed(e.to_string())))?;
    let found = value
        .get("schema_version")
        .and_then(|v| v.as_str())
        .ok_or_else(|| {
            Error::from(CheckpointError::Malformed("missing schema_version".into()))
        })?;
    if found != CHECKPOINT_SCHEMA_VERSION {
        return Err(CheckpointError::VersionMismatch {
            found: found.to_string(),
            expected: CHECKPOINT_SCHEMA_VERSION.to_string(),
        }
        .into());
    }
    let ckpt: Checkpoint = serde_json::from_value(value)
        .map_err(|e| Error::from(CheckpointError::Malformed(e.to_string())))?;
    // Validate every tensor length against its shape up front.
    for nt in &ckpt.tensors {
        tensor_of(nt)?;
    }
    Ok(ckpt)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::rng::seed_rng;

    fn sample_checkpoint() -> Checkpoint {
        let cfg = ExperimentConfig {
            hidden_width: 8,
            hidden_layers: 2,
            time_embed_dim: 4,
            ..ExperimentConfig::default()
        };
        let params = DenoiserParams::init(cfg.architecture(), &mut seed_rng(3)).unwrap();
        Checkpoint::from_params(&params, None, &cfg, 3)
    }

    #[test]
    fn roundtrip_is_value_identical() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("fp.json");
        let ckpt = sample_checkpoint();
        save_checkpoint(&path, &ckpt).unwrap();
        let back = load_checkpoint(&path).unwrap();
        let a = ckpt.params().unwrap();
        let b = back.params().unwrap();
        assert_eq!(a, b);
        assert_eq!(back.seed, 3);

        // Byte-identical when saved twice.
        let path2 = dir.path().join("fp2.json");
        save_checkpoint(&path2, &back).unwrap();
        assert_eq!(
            std::fs::read(&path).unwrap(),
            std::fs::read(&path2).unwrap()
        );
    }

    #[test]
    fn truncated_file_is_malformed() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("fp.json");
        save_checkpoint(&path, &sample_checkpoint()).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        std::fs::write(&path, &text[..text.len() / 2]).unwrap();
        match load_checkpoint(&path) {
            Err(Error::Checkpoint(CheckpointError::Malformed(_))) => {}
            other => panic!("expected Malformed, got {other:?}"),
        }
    }

    #[test]
    fn version_bump_names_both_versions() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("fp.json");
        save_checkpoint(&path, &sample_checkpoint()).unwrap();
        let text = std::fs::read_to_string(&path)
            .unwrap()
            .replace("\"schema_version\": \"1\"", "\"schema_version\": \"99\"");
        std::fs::write(&path, text).unwrap();
        match load_checkpoint(&path) {
            Err(Error::Checkpoint(CheckpointError::VersionMismatch { found, expected })) => {
                assert_eq!(found, "99");
                assert_eq!(expected, "1");
            }
            other => panic!("expected VersionMismatch, got {other:?}"),
        }
    }

    #[test]
    fn corrupt_tensor_length_is_shape_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("fp.json");
        let mut ckpt = sample_checkpoint();
        ckpt.tensors[0].data.pop();
        save_checkpoint(&path, &ckpt).unwrap();
        match load_checkpoint(&path) {
            Err(Error::Checkpoint(CheckpointError::ShapeMismatch { name, .. })) => {
                assert_eq!(name, "layer0/weight");
            }
            other => panic!("expected ShapeMismatch, got {other:?}"),
        }
    }
}
