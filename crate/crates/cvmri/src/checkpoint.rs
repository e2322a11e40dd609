//! Model checkpoint container.
//!
//! A checkpoint is a directory holding `weights.safetensors` (online
//! weights), optionally `ema.safetensors` (averaged weights), and a
//! `meta.json` sidecar with the resolved configuration snapshot,
//! latent standardization statistics, and the training log. Nothing
//! time-dependent is stored, so repeated runs with the same seed
//! produce byte-identical checkpoints.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use candle_core::safetensors as st;
use candle_nn::VarMap;
use serde::{Deserialize, Serialize};

use crate::archive::{read_json, write_json};
use crate::error::{Error, Result};
use crate::nn::Ema;

pub const WEIGHTS_FILE: &str = "weights.safetensors";
pub const EMA_FILE: &str = "ema.safetensors";
pub const META_FILE: &str = "meta.json";

/// Per-channel mean and standard deviation of encoder latents, used to
/// standardize flow-model inputs and invert the mapping after sampling.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct LatentStats {
    pub mean: [f64; 2],
    pub std: [f64; 2],
}

/// One row of a training log.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LogRow {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub extra: BTreeMap<String, f64>,
}

/// JSON sidecar stored next to the weights.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointMeta {
    /// Model kind tag, e.g. "cvae", "flow-stage1", "flow-stage2".
    pub kind: String,
    pub seed: u64,
    /// Snapshot of the resolved experiment configuration.
    pub config: serde_json::Value,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub latent_stats: Option<LatentStats>,
    #[serde(default)]
    pub training_log: Vec<LogRow>,
}

fn weights_path(dir: &Path) -> PathBuf {
    dir.join(WEIGHTS_FILE)
}

fn ema_path(dir: &Path) -> PathBuf {
    dir.join(EMA_FILE)
}

fn meta_path(dir: &Path) -> PathBuf {
    dir.join(META_FILE)
}

/// Saves weights, optional averaged weights, and the sidecar.
pub fn save(dir: &Path, meta: &CheckpointMeta, varmap: &VarMap, ema: Option<&Ema>) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    varmap.save(weights_path(dir))?;
    if let Some(ema) = ema {
        let tensors: Vec<(String, candle_core::Tensor)> =
            ema.weights().iter().map(|(k, v)| (k.clone(), v.clone())).collect();
        let map: std::collections::HashMap<String, candle_core::Tensor> =
            tensors.into_iter().collect();
        st::save(&map, ema_path(dir))?;
    }
    write_json(&meta_path(dir), meta)
}

/// Reads the sidecar; errors with a missing-artifact message naming the
/// path when the checkpoint does not exist.
pub fn load_meta(dir: &Path) -> Result<CheckpointMeta> {
    if !meta_path(dir).is_file() {
        return Err(Error::MissingArtifact(format!("checkpoint not found at {}", dir.display())));
    }
    read_json(&meta_path(dir))
}

/// Loads weights into an already-built variable map, matching by name.
/// With `use_ema` the averaged weights are loaded instead.
pub fn load_into(dir: &Path, varmap: &mut VarMap, use_ema: bool) -> Result<()> {
    let path = if use_ema { ema_path(dir) } else { weights_path(dir) };
    if !path.is_file() {
        return Err(Error::MissingArtifact(format!("weights not found at {}", path.display())));
    }
    varmap.load(path)?;
    Ok(())
}

/// Whether `dir` looks like a saved checkpoint.
pub fn exists(dir: &Path) -> bool {
    meta_path(dir).is_file() && weights_path(dir).is_file()
}

/// Requires `dir` to be a checkpoint of the given kind; used to enforce
/// stage ordering between pipeline steps.
pub fn require_kind(dir: &Path, kind: &str) -> Result<CheckpointMeta> {
    let meta = load_meta(dir)?;
    if meta.kind != kind {
        return Err(Error::invalid(format!(
            "{} holds a '{}' checkpoint, expected '{kind}'",
            dir.display(),
            meta.kind
        )));
    }
    Ok(meta)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{device, var_builder};
    use candle_nn::{linear, Module};

    fn toy_meta() -> CheckpointMeta {
        CheckpointMeta {
            kind: "cvae".into(),
            seed: 7,
            config: serde_json::json!({"lr": 1e-3}),
            latent_stats: Some(LatentStats { mean: [0.1, -0.2], std: [1.5, 0.9] }),
            training_log: vec![LogRow {
                epoch: 0,
                train_loss: 1.0,
                val_loss: Some(0.9),
                extra: BTreeMap::new(),
            }],
        }
    }

    #[test]
    fn roundtrip_restores_weights_and_meta() {
        let dev = device();
        let dir = tempfile::tempdir().unwrap();
        let varmap = VarMap::new();
        let lin = linear(3, 2, var_builder(&varmap, &dev)).unwrap();
        let x = candle_core::Tensor::randn(0f32, 1f32, (4, 3), &dev).unwrap();
        let y0: Vec<f32> =
            lin.forward(&x).unwrap().flatten_all().unwrap().to_vec1().unwrap();

        let ema = Ema::new(&varmap, 0.999).unwrap();
        save(dir.path(), &toy_meta(), &varmap, Some(&ema)).unwrap();

        // Rebuild the model with fresh weights and load the saved ones.
        let mut varmap2 = VarMap::new();
        let lin2 = linear(3, 2, var_builder(&varmap2, &dev)).unwrap();
        load_into(dir.path(), &mut varmap2, false).unwrap();
        let y1: Vec<f32> =
            lin2.forward(&x).unwrap().flatten_all().unwrap().to_vec1().unwrap();
        assert_eq!(y0, y1);

        // EMA weights were initialized as a copy, so they match too.
        load_into(dir.path(), &mut varmap2, true).unwrap();
        let y2: Vec<f32> =
            lin2.forward(&x).unwrap().flatten_all().unwrap().to_vec1().unwrap();
        assert_eq!(y0, y2);

        let meta = load_meta(dir.path()).unwrap();
        assert_eq!(meta.kind, "cvae");
        assert_eq!(meta.latent_stats, toy_meta().latent_stats);
        assert_eq!(meta.training_log.len(), 1);
    }

    #[test]
    fn missing_checkpoint_is_reported_with_path() {
        let dir = tempfile::tempdir().unwrap();
        let missing = dir.path().join("nope");
        let err = load_meta(&missing).unwrap_err();
        assert!(err.to_string().contains("nope"));
        assert!(!exists(&missing));
    }

    #[test]
    fn kind_mismatch_is_an_error() {
        let dev = device();
        let dir = tempfile::tempdir().unwrap();
        let varmap = VarMap::new();
        let _ = linear(2, 2, var_builder(&varmap, &dev)).unwrap();
        save(dir.path(), &toy_meta(), &varmap, None).unwrap();
        assert!(require_kind(dir.path(), "cvae").is_ok());
        assert!(require_kind(dir.path(), "flow-stage1").is_err());
    }
}
