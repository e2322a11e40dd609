//! Experiment configuration.
//!
//! A single TOML file describes a full run: phantom geometry, split
//! seed, autoencoder and flow hyperparameters, sampler settings, and
//! the evaluation plan. Unknown keys are rejected, and every command
//! writes a frozen copy of its resolved configuration next to its
//! outputs.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::archive::atomic_write;
use crate::cvae::CvaeConfig;
use crate::error::{Error, Result};
use crate::evalharness::ClassifierConfig;
use crate::flowmatch::FlowConfig;
use crate::phantom::PhantomSpec;

/// Guidance and integration settings for latent sampling.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerConfig {
    /// Guidance scale for latent-fidelity evaluation samples.
    pub w_eval: f64,
    /// Guidance scale for downstream (Stage-2) samples.
    pub w_downstream: f64,
    pub n_steps: usize,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig { w_eval: 1.0, w_downstream: 2.0, n_steps: 50 }
    }
}

/// Evaluation-plan settings.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Independent synthetic test sets for the discriminator.
    pub synthetic_test_sets: usize,
    /// Synthetic patches generated per (sequence, class) stratum for
    /// the downstream experiments.
    pub synth_pool_per_stratum: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { synthetic_test_sets: 4, synth_pool_per_stratum: 64 }
    }
}

/// The complete experiment description.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    /// Global seed; all randomness derives from it via named
    /// substreams.
    pub seed: u64,
    pub phantom: PhantomSpec,
    /// Patches drawn from volumes without lesion annotations.
    pub patches_per_unannotated_volume: usize,
    pub cvae: CvaeConfig,
    /// Stage-1 flow training.
    pub flow: FlowConfig,
    /// Stage-2 finetuning.
    pub finetune: FlowConfig,
    pub classifier: ClassifierConfig,
    pub sampler: SamplerConfig,
    pub eval: EvalConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 0,
            phantom: PhantomSpec::default(),
            patches_per_unannotated_volume: 12,
            cvae: CvaeConfig::default(),
            flow: FlowConfig::default(),
            finetune: FlowConfig::default(),
            classifier: ClassifierConfig::default(),
            sampler: SamplerConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.sampler.w_eval < 1.0 || self.sampler.w_downstream < 1.0 {
            return Err(Error::Config {
                key: "sampler".into(),
                message: "guidance scales must be >= 1".into(),
            });
        }
        if self.sampler.n_steps == 0 {
            return Err(Error::Config {
                key: "sampler.n_steps".into(),
                message: "must be >= 1".into(),
            });
        }
        let p = self.patches_per_unannotated_volume;
        if !(crate::patching::PATCHES_PER_VOLUME.0..=crate::patching::PATCHES_PER_VOLUME.1)
            .contains(&p)
        {
            return Err(Error::Config {
                key: "patches_per_unannotated_volume".into(),
                message: format!("{p} outside {:?}", crate::patching::PATCHES_PER_VOLUME),
            });
        }
        self.classifier.validate().map_err(|e| Error::Config {
            key: "classifier.seeds".into(),
            message: e.to_string(),
        })?;
        Ok(())
    }
}

impl ExperimentConfig {
    /// A configuration sized for quick runs and tests: small phantom,
    /// short trainings.
    pub fn desk_small() -> Self {
        let mut cfg = ExperimentConfig::default();
        cfg.phantom.labeled_volumes_per_cell = 4;
        cfg.phantom.unlabeled_volumes_per_cell = 4;
        cfg.phantom.slices_per_volume = 2;
        cfg.cvae.epochs = 2;
        cfg.flow.epochs = 2;
        cfg.finetune.epochs = 1;
        cfg.finetune.phase_a_epochs = 1;
        // Short runs take few optimizer steps; the production EMA decay
        // would leave the averaged weights dominated by initialization.
        cfg.flow.ema_decay = 0.9;
        cfg.finetune.ema_decay = 0.9;
        cfg.classifier.ema_decay = 0.9;
        cfg.classifier.epochs = 2;
        cfg.classifier.seeds = vec![0, 1];
        cfg.sampler.n_steps = 8;
        cfg.eval.synthetic_test_sets = 2;
        cfg.eval.synth_pool_per_stratum = 16;
        cfg
    }
}

/// Parses a TOML config file; schema violations are reported with the
/// offending key path.
pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::io(path.display().to_string(), e))?;
    let cfg: ExperimentConfig = toml::from_str(&text).map_err(|e| Error::Config {
        key: path.display().to_string(),
        message: e.message().to_string(),
    })?;
    cfg.validate()?;
    Ok(cfg)
}

/// Writes the resolved configuration next to a command's outputs.
pub fn freeze_config(cfg: &ExperimentConfig, dir: &Path, command: &str) -> Result<()> {
    let text = toml::to_string_pretty(cfg)
        .map_err(|e| Error::Format(format!("config serialization: {e}")))?;
    atomic_write(&dir.join(format!("{command}.config.toml")), text.as_bytes())
}
