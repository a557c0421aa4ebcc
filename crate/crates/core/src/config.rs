//! Flat JSON run configuration shared by every subcommand.
//!
//! Every key is optional and unknown keys are rejected. The document maps
//! onto the desk dataset manifest, the VAE trainer, the predictor shape and
//! the predictor trainer:
//!
//! | key | default | meaning |
//! |---|---|---|
//! | `seed` | 0 | master seed (model init, shuffles, noise) |
//! | `fps` | 10 | frame rate of generated data |
//! | `seq_len` | 30 | frames per generated sequence |
//! | `noise_std` | 1.0 | per-coordinate Gaussian noise (mm) |
//! | `amplitude_jitter`, `phase_jitter` | 0.2, 0.5 | per-sequence variation |
//! | `train_per_action` | 20 | atomic training sequences per action |
//! | `val_atomic_per_action`, `val_composites_per_pair` | 2, 1 | |
//! | `test_atomic_per_action`, `test_composites_per_pair` | 3, 2 | |
//! | `train_seed_base`, `val_seed_base`, `test_seed_base` | 0, 10000, 20000 | |
//! | `cag_epochs`, `cag_lr`, `cag_batch_size` | 400, 0.0005, 32 | |
//! | `cag_kl_weight`, `cag_latent_dim`, `cag_hidden` | 1.0, 16, [256, 256] | |
//! | `cag_num_coeffs` | all | retained DCT coefficients in the VAE |
//! | `synth_per_pair` | 4 | composites minted per (upper, lower) pair |
//! | `input_frames`, `output_frames` | 20, 10 | N and T |
//! | `preset` | `"desk"` | predictor size, `"desk"` or `"full"` |
//! | `feature_width`, `heads`, `policy_hidden`, `key_dim` | preset | overrides |
//! | `lr`, `lr_decay_per_epoch`, `batch_size`, `epochs` | 0.0005, 0.96, 32, 50 | |
//! | `constrain_epochs`, `w_tendency`, `temperature` | 20, 100.0, 1.0 | |
//! | `policy_lr_scale` | 10.0 | learning-rate multiplier for the policies |
//! | `horizons` | [1, 3, 5, 8, 10] | 1-based future frames reported by eval |

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::datagen::{DatasetManifest, SplitSpec};
use crate::error::{Error, Result};
use crate::motion::Part;
use crate::predictor::PredictorConfig;
use crate::train::TrainConfig;
use crate::vae::CagTrainConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    #[default]
    Desk,
    Full,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fps: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seq_len: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub noise_std: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub amplitude_jitter: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub phase_jitter: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub train_per_action: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub val_atomic_per_action: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub val_composites_per_pair: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub test_atomic_per_action: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub test_composites_per_pair: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub train_seed_base: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub val_seed_base: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub test_seed_base: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cag_epochs: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cag_lr: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cag_batch_size: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cag_kl_weight: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cag_latent_dim: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cag_hidden: Option<Vec<usize>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cag_num_coeffs: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub synth_per_pair: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub input_frames: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub output_frames: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub preset: Option<Preset>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub feature_width: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub heads: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub policy_hidden: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub key_dim: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lr: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lr_decay_per_epoch: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub batch_size: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub epochs: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub constrain_epochs: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub w_tendency: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub temperature: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub policy_lr_scale: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub horizons: Option<Vec<usize>>,
}

pub const DEFAULT_HORIZONS: [usize; 5] = [1, 3, 5, 8, 10];
pub const DEFAULT_SYNTH_PER_PAIR: usize = 4;

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serializes")
    }

    pub fn seed(&self) -> u64 {
        self.seed.unwrap_or(0)
    }

    pub fn manifest(&self) -> Result<DatasetManifest> {
        let mut m = DatasetManifest::desk_default();
        if let Some(v) = self.fps {
            m.fps = v;
        }
        if let Some(v) = self.seq_len {
            m.seq_len = v;
        }
        if let Some(v) = self.noise_std {
            for a in &mut m.actions {
                a.noise_std = v;
            }
        }
        if let Some(v) = self.amplitude_jitter {
            m.amplitude_jitter = v;
        }
        if let Some(v) = self.phase_jitter {
            m.phase_jitter = v;
        }
        let split = |s: &mut SplitSpec, base: Option<u64>, atomic: Option<usize>, comp: Option<usize>| {
            if let Some(v) = base {
                s.seed_base = v;
            }
            if let Some(v) = atomic {
                s.atomic_per_action = v;
            }
            if let Some(v) = comp {
                s.composites_per_pair = v;
            }
        };
        split(&mut m.train, self.train_seed_base, self.train_per_action, None);
        split(&mut m.val, self.val_seed_base, self.val_atomic_per_action, self.val_composites_per_pair);
        split(&mut m.test, self.test_seed_base, self.test_atomic_per_action, self.test_composites_per_pair);
        m.validate()?;
        Ok(m)
    }

    pub fn cag(&self) -> CagTrainConfig {
        let d = CagTrainConfig::default();
        CagTrainConfig {
            epochs: self.cag_epochs.unwrap_or(d.epochs),
            lr: self.cag_lr.unwrap_or(d.lr),
            batch_size: self.cag_batch_size.unwrap_or(d.batch_size),
            kl_weight: self.cag_kl_weight.unwrap_or(d.kl_weight),
            latent_dim: self.cag_latent_dim.unwrap_or(d.latent_dim),
            hidden_dims: self.cag_hidden.clone().unwrap_or(d.hidden_dims),
            num_coeffs: self.cag_num_coeffs.or(d.num_coeffs),
            seed: self.seed(),
        }
    }

    pub fn synth_per_pair(&self) -> usize {
        self.synth_per_pair.unwrap_or(DEFAULT_SYNTH_PER_PAIR)
    }

    pub fn train(&self) -> Result<TrainConfig> {
        let d = TrainConfig::default();
        let c = TrainConfig {
            lr: self.lr.unwrap_or(d.lr),
            lr_decay_per_epoch: self.lr_decay_per_epoch.unwrap_or(d.lr_decay_per_epoch),
            batch_size: self.batch_size.unwrap_or(d.batch_size),
            epochs: self.epochs.unwrap_or(d.epochs),
            constrain_epochs: self.constrain_epochs.unwrap_or(d.constrain_epochs),
            w_tendency: self.w_tendency.unwrap_or(d.w_tendency),
            input_frames: self.input_frames.unwrap_or(d.input_frames),
            output_frames: self.output_frames.unwrap_or(d.output_frames),
            seed: self.seed(),
            temperature: self.temperature.unwrap_or(d.temperature),
            policy_lr_scale: self.policy_lr_scale.unwrap_or(d.policy_lr_scale),
        };
        c.validate()?;
        Ok(c)
    }

    pub fn predictor(&self, parts: Vec<Part>) -> Result<PredictorConfig> {
        let t = self.train()?;
        let base = match self.preset.unwrap_or_default() {
            Preset::Desk => PredictorConfig::desk(parts, t.input_frames, t.output_frames),
            Preset::Full => PredictorConfig::full(parts, t.input_frames, t.output_frames),
        };
        let c = PredictorConfig {
            feature_width: self.feature_width.unwrap_or(base.feature_width),
            heads: self.heads.unwrap_or(base.heads),
            policy_hidden: self.policy_hidden.unwrap_or(base.policy_hidden),
            key_dim: self.key_dim.unwrap_or(base.key_dim),
            ..base
        };
        c.validate()?;
        Ok(c)
    }

    pub fn horizons(&self) -> Vec<usize> {
        self.horizons.clone().unwrap_or_else(|| DEFAULT_HORIZONS.to_vec())
    }
}
