//! Model and training configuration.
//!
//! `TrainConfig` round-trips through a flat TOML document; every field has a
//! serde default so partial config files work.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Backbone family for the two encoder streams.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Backbone {
    /// Four stride-2 conv blocks with configurable widths; runs on CPU in
    /// seconds and satisfies the same pyramid contract as the large one.
    Tiny,
    /// Stage widths (256, 512, 1024, 2048) like ResNet50's four stages.
    Resnet50Shaped,
}

/// Which model variant to train.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    /// Dual stream + embedding heads + redundancy regularizer.
    Full,
    /// Dual stream, no embedding heads, no regularizer; the decoder consumes
    /// the concatenated multi-level features directly.
    Base,
    /// Embedding heads replaced by a direct linear projection of the pooled
    /// encoder output.
    Ss,
    /// Single stream over the RGB image only.
    RgbOnly,
    /// Single stream over RGB and depth concatenated at the input layer.
    EarlyFusion,
    /// Full model, but prediction export reports the fused-branch map.
    PfOnly,
}

impl Ablation {
    pub fn is_single_stream(self) -> bool {
        matches!(self, Ablation::RgbOnly | Ablation::EarlyFusion)
    }

    pub fn has_embeddings(self) -> bool {
        matches!(self, Ablation::Full | Ablation::Ss | Ablation::PfOnly)
    }
}

/// Loss composition weights, stored on disk as a 3-element array so the
/// config document stays flat.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 3]", into = "[f64; 3]")]
pub struct LossWeights {
    /// Weight of the fused-branch cross-entropy term.
    pub lambda1: f64,
    /// Weight of the RGB-branch cross-entropy term.
    pub lambda2: f64,
    /// Weight of the depth-branch cross-entropy term.
    pub lambda3: f64,
}

impl From<[f64; 3]> for LossWeights {
    fn from(v: [f64; 3]) -> Self {
        LossWeights {
            lambda1: v[0],
            lambda2: v[1],
            lambda3: v[2],
        }
    }
}

impl From<LossWeights> for [f64; 3] {
    fn from(w: LossWeights) -> Self {
        [w.lambda1, w.lambda2, w.lambda3]
    }
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda1: 0.8,
            lambda2: 0.6,
            lambda3: 0.4,
        }
    }
}

fn default_stage_channels() -> [usize; 4] {
    [16, 32, 64, 128]
}
fn default_reduced_channels() -> usize {
    32
}
fn default_embed_dim() -> usize {
    6
}
fn default_input_size() -> (usize, usize) {
    (352, 352)
}
fn default_mi_weight() -> f64 {
    0.1
}
fn default_backbone() -> Backbone {
    Backbone::Tiny
}
fn default_aspp_dilations() -> Vec<usize> {
    vec![3, 6, 12, 18]
}

/// Structural configuration shared by training and inference.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Backbone stage widths before channel reduction (tiny backbone only;
    /// the resnet50-shaped backbone fixes them).
    #[serde(default = "default_stage_channels")]
    pub stage_channels: [usize; 4],
    /// Channel count C after the per-stage reduction convolutions.
    #[serde(default = "default_reduced_channels")]
    pub reduced_channels: usize,
    /// Embedding dimension K.
    #[serde(default = "default_embed_dim")]
    pub embed_dim: usize,
    /// Network input size (H, W); both divisible by 32.
    #[serde(default = "default_input_size")]
    pub input_size: (usize, usize),
    /// (lambda1, lambda2, lambda3) for the auxiliary cross-entropy terms.
    #[serde(default)]
    pub loss_weights: LossWeights,
    /// Weight lambda of the redundancy regularizer.
    #[serde(default = "default_mi_weight")]
    pub mi_weight: f64,
    #[serde(default = "default_backbone")]
    pub backbone: Backbone,
    #[serde(default)]
    pub seed: u64,
    /// Optional weights file for backbone initialization; both streams start
    /// from the same weights when set.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pretrained: Option<PathBuf>,
    /// Dilation rates of the atrous pyramid branches. The defaults are
    /// truncated relative to large-grid segmentation settings because the
    /// stage-4 grid is small (e.g. 11x11 at 352x352 input).
    #[serde(default = "default_aspp_dilations")]
    pub aspp_dilations: Vec<usize>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            stage_channels: default_stage_channels(),
            reduced_channels: default_reduced_channels(),
            embed_dim: default_embed_dim(),
            input_size: default_input_size(),
            loss_weights: LossWeights::default(),
            mi_weight: default_mi_weight(),
            backbone: default_backbone(),
            seed: 0,
            pretrained: None,
            aspp_dilations: default_aspp_dilations(),
        }
    }
}

impl ModelConfig {
    /// Effective backbone stage widths.
    pub fn backbone_widths(&self) -> [usize; 4] {
        match self.backbone {
            Backbone::Tiny => self.stage_channels,
            Backbone::Resnet50Shaped => [256, 512, 1024, 2048],
        }
    }

    /// Stem width feeding the first stage.
    pub fn stem_width(&self) -> usize {
        match self.backbone {
            Backbone::Tiny => self.stage_channels[0],
            Backbone::Resnet50Shaped => 64,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.embed_dim < 2 {
            return Err(Error::Config(format!(
                "embed_dim must be at least 2, got {}",
                self.embed_dim
            )));
        }
        if self.reduced_channels == 0 {
            return Err(Error::Config("reduced_channels must be positive".into()));
        }
        if self.stage_channels.iter().any(|&c| c == 0) {
            return Err(Error::Config("stage_channels must all be positive".into()));
        }
        let (h, w) = self.input_size;
        if h % 32 != 0 || w % 32 != 0 {
            return Err(Error::Config(format!(
                "input_size must be divisible by 32, got {h}x{w}"
            )));
        }
        if self.mi_weight < 0.0 {
            return Err(Error::Config(format!(
                "mi_weight must be non-negative, got {}",
                self.mi_weight
            )));
        }
        if self.aspp_dilations.is_empty() {
            return Err(Error::Config("aspp_dilations must not be empty".into()));
        }
        Ok(())
    }
}

fn default_epochs() -> usize {
    100
}
fn default_lr() -> f64 {
    5e-5
}
fn default_decay_step() -> usize {
    80
}
fn default_decay_rate() -> f64 {
    0.1
}
fn default_batch_size() -> usize {
    5
}
fn default_ablation() -> Ablation {
    Ablation::Full
}
fn default_checkpoint_dir() -> PathBuf {
    PathBuf::from("runs")
}

/// Full training configuration. Flattens [`ModelConfig`] so the on-disk TOML
/// document is a single flat key/value table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    #[serde(flatten)]
    pub model: ModelConfig,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_lr")]
    pub lr: f64,
    /// Epoch interval of the step learning-rate decay.
    #[serde(default = "default_decay_step")]
    pub decay_step: usize,
    /// Multiplicative decay factor.
    #[serde(default = "default_decay_rate")]
    pub decay_rate: f64,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_checkpoint_dir")]
    pub checkpoint_dir: PathBuf,
    #[serde(default = "default_ablation")]
    pub ablation: Ablation,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            model: ModelConfig::default(),
            epochs: default_epochs(),
            lr: default_lr(),
            decay_step: default_decay_step(),
            decay_rate: default_decay_rate(),
            batch_size: default_batch_size(),
            checkpoint_dir: default_checkpoint_dir(),
            ablation: default_ablation(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if self.decay_step == 0 {
            return Err(Error::Config("decay_step must be positive".into()));
        }
        Ok(())
    }

    /// Learning rate in effect during `epoch` (0-based) under step decay.
    pub fn lr_at_epoch(&self, epoch: usize) -> f64 {
        self.lr * self.decay_rate.powi((epoch / self.decay_step) as i32)
    }

    pub fn from_toml_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: TrainConfig =
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Serde(e.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_training_schedule() {
        let cfg = TrainConfig::default();
        assert_eq!(cfg.epochs, 100);
        assert_eq!(cfg.lr, 5e-5);
        assert_eq!(cfg.decay_step, 80);
        assert_eq!(cfg.decay_rate, 0.1);
        assert_eq!(cfg.batch_size, 5);
        assert_eq!(cfg.model.reduced_channels, 32);
        assert_eq!(cfg.model.embed_dim, 6);
        assert_eq!(cfg.model.input_size, (352, 352));
        assert_eq!(cfg.model.loss_weights, LossWeights::default());
        assert_eq!(cfg.model.mi_weight, 0.1);
    }

    #[test]
    fn lr_decays_by_rate_after_decay_step() {
        let cfg = TrainConfig::default();
        assert_eq!(cfg.lr_at_epoch(0), 5e-5);
        assert_eq!(cfg.lr_at_epoch(79), 5e-5);
        let lr80 = cfg.lr_at_epoch(80);
        assert!((lr80 - 5e-6).abs() < 1e-18, "lr at epoch 80 = {lr80}");
    }

    #[test]
    fn embed_dim_below_two_rejected() {
        let mut cfg = ModelConfig::default();
        cfg.embed_dim = 1;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn input_size_must_divide_32() {
        let mut cfg = ModelConfig::default();
        cfg.input_size = (100, 352);
        assert!(cfg.validate().is_err());
        cfg.input_size = (64, 32);
        assert!(cfg.validate().is_ok());
    }

    #[test]
    fn toml_round_trip_is_flat() {
        let cfg = TrainConfig::default();
        let text = cfg.to_toml_string().unwrap();
        // A flat document has no table headers.
        assert!(
            text.lines().all(|l| !l.trim_start().starts_with('[')),
            "expected flat keys, got:\n{text}"
        );
        let back: TrainConfig = toml::from_str(&text).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn resnet50_shaped_widths() {
        let cfg = ModelConfig {
            backbone: Backbone::Resnet50Shaped,
            ..ModelConfig::default()
        };
        assert_eq!(cfg.backbone_widths(), [256, 512, 1024, 2048]);
    }
}
