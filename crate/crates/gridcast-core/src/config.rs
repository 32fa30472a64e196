//! Run configuration: one TOML-backed struct that pins every hyperparameter,
//! the dataset source, and the stage list.

use crate::error::{Error, Result};
use crate::ogm::OgmVariant;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::Path;

/// Where scenarios come from.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(untagged)]
pub enum DatasetSource {
    /// Directory holding `trajectories.csv` + `scenes/`.
    Path { path: String },
    /// Procedurally generated corpus.
    Synthetic {
        synthetic_seed: u64,
        n_scenes: usize,
        n_agents: usize,
        n_frames: usize,
        scene_cells: usize,
    },
}

impl Default for DatasetSource {
    fn default() -> Self {
        DatasetSource::Synthetic {
            synthetic_seed: 7,
            n_scenes: 4,
            n_agents: 12,
            n_frames: 30,
            scene_cells: 40,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct RunConfig {
    pub grid_size: usize,
    pub crop_extent: f64,
    /// MDP horizon `N`.
    pub horizon: usize,
    pub t_p: usize,
    pub t_f: usize,
    /// Recurrent/attention width.
    pub hidden: usize,
    /// Convolutional recurrent hidden channels.
    pub conv_hidden: usize,
    /// Scene feature channels.
    pub scene_channels: usize,
    /// Scene encoder intermediate width.
    pub scene_mid: usize,
    pub heads: usize,
    pub deconv_k: usize,
    pub beta: f64,
    pub tau: f64,
    /// Over-sample count `C`.
    pub c_samples: usize,
    /// Representative count `K`.
    pub k_reps: usize,
    pub refine_layers: usize,
    pub refine_heads: usize,
    pub dropout: f64,
    pub lr_stage123: f64,
    pub lr_stage4: f64,
    /// Epochs for the four stages, in order.
    pub epochs: [usize; 4],
    pub batch_size: usize,
    /// Monte Carlo samples for the reverse cross-entropy term.
    pub reverse_ce_samples: usize,
    pub seed: u64,
    pub ogm_variant: String,
    /// Apply 90-degree rotation / mirror corpus augmentation.
    pub augment: bool,
    /// Fraction of scenarios held out for evaluation.
    pub heldout_fraction: f64,
    /// Optional caps to keep desk-scale runs bounded (0 = no cap).
    pub max_train_scenarios: usize,
    pub max_heldout_scenarios: usize,
    /// Stage 4 trains with the variety loss; optionally add the
    /// beta-weighted symmetric cross-entropy as well.
    pub stage4_add_sce: bool,
    pub dataset: DatasetSource,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            grid_size: 25,
            crop_extent: 200.0,
            horizon: 20,
            t_p: 8,
            t_f: 12,
            hidden: 64,
            conv_hidden: 32,
            scene_channels: 32,
            scene_mid: 16,
            heads: 4,
            deconv_k: 5,
            beta: 0.2,
            tau: 1.0,
            c_samples: 200,
            k_reps: 20,
            refine_layers: 3,
            refine_heads: 8,
            dropout: 0.1,
            lr_stage123: 1e-3,
            lr_stage4: 1e-4,
            epochs: [20, 20, 10, 5],
            batch_size: 32,
            reverse_ce_samples: 2,
            seed: 1,
            ogm_variant: "deconv".into(),
            augment: true,
            heldout_fraction: 0.2,
            max_train_scenarios: 0,
            max_heldout_scenarios: 0,
            stage4_add_sce: false,
            dataset: DatasetSource::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.grid_size < 2 {
            return Err(Error::config("grid_size must be >= 2"));
        }
        if self.crop_extent <= 0.0 || self.tau <= 0.0 {
            return Err(Error::config("crop_extent and tau must be positive"));
        }
        if self.beta < 0.0 {
            return Err(Error::config("beta must be >= 0"));
        }
        if self.t_p < 2 || self.t_f < 1 || self.horizon < 1 {
            return Err(Error::config("t_p >= 2, t_f >= 1, horizon >= 1 required"));
        }
        if self.c_samples < self.k_reps || self.k_reps < 1 {
            return Err(Error::config("need C >= K >= 1"));
        }
        if self.hidden % self.heads != 0 || self.hidden % self.refine_heads != 0 {
            return Err(Error::config("hidden must divide into attention heads"));
        }
        if self.deconv_k % 2 != 1 {
            return Err(Error::config("deconv kernel must be odd"));
        }
        self.ogm_variant()?;
        Ok(())
    }

    pub fn ogm_variant(&self) -> Result<OgmVariant> {
        self.ogm_variant.parse()
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let cfg: RunConfig =
            toml::from_str(&text).map_err(|e| Error::config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = toml::to_string_pretty(self)
            .map_err(|e| Error::config(format!("serializing config: {e}")))?;
        std::fs::write(path, text)?;
        Ok(())
    }

    /// Digest of every field that affects model shape or training semantics;
    /// checkpoints refuse to load under a different fingerprint.
    pub fn fingerprint(&self) -> String {
        let canonical = format!(
            "grid={} extent={} N={} tp={} tf={} hidden={} conv={} scene={} mid={} heads={} k={} \
             C={} K={} rl={} rh={} drop={} variant={} seed={}",
            self.grid_size,
            self.crop_extent,
            self.horizon,
            self.t_p,
            self.t_f,
            self.hidden,
            self.conv_hidden,
            self.scene_channels,
            self.scene_mid,
            self.heads,
            self.deconv_k,
            self.c_samples,
            self.k_reps,
            self.refine_layers,
            self.refine_heads,
            self.dropout,
            self.ogm_variant,
            self.seed,
        );
        let mut h = Sha256::new();
        h.update(canonical.as_bytes());
        hex_string(&h.finalize())
    }
}

pub(crate) fn hex_string(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
