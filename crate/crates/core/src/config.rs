//! Architecture and run configuration.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Side length of the square patches cut by the embedding layer.
pub const PATCH_SIZE: usize = 4;
pub const LN_EPS: f64 = 1e-5;
pub const COCO_KEYPOINTS: usize = 17;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FusionMethod {
    /// Element-wise sum of the upsampled coarse map and the lateral map.
    Sum,
    /// Channel concatenation followed by a 1×1 projection back to D channels.
    Concat,
}

impl FromStr for FusionMethod {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "sum" => Ok(FusionMethod::Sum),
            "concat" => Ok(FusionMethod::Concat),
            other => Err(Error::Config(format!("unknown fusion method `{other}`"))),
        }
    }
}

impl fmt::Display for FusionMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FusionMethod::Sum => "sum",
            FusionMethod::Concat => "concat",
        })
    }
}

/// Named architecture presets.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Preset {
    SwinT,
    SwinS,
    SwinB,
    SwinL,
    Toy,
}

impl FromStr for Preset {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "swin-t" => Ok(Preset::SwinT),
            "swin-s" => Ok(Preset::SwinS),
            "swin-b" => Ok(Preset::SwinB),
            "swin-l" => Ok(Preset::SwinL),
            "toy" => Ok(Preset::Toy),
            other => Err(Error::Config(format!("unknown model preset `{other}`"))),
        }
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Preset::SwinT => "swin-t",
            Preset::SwinS => "swin-s",
            Preset::SwinB => "swin-b",
            Preset::SwinL => "swin-l",
            Preset::Toy => "toy",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SwinConfig {
    /// Channels of stage 1 (C); stage s has C·2^s.
    pub embed_dim: usize,
    pub depths: [usize; 4],
    pub heads: [usize; 4],
    /// Attention window side (M).
    pub window: usize,
    pub mlp_ratio: f64,
    pub input_h: usize,
    pub input_w: usize,
    pub num_keypoints: usize,
    pub fusion_method: FusionMethod,
    /// Channels of the fused pyramid (D).
    pub fusion_channels: usize,
    #[serde(default = "default_true")]
    pub relative_position_bias: bool,
}

fn default_true() -> bool {
    true
}

/// Window used for a given square input: 12 at 384, 7 otherwise.
pub fn default_window(input: usize) -> usize {
    if input == 384 {
        12
    } else {
        7
    }
}

impl SwinConfig {
    pub fn preset(preset: Preset, input: usize, fusion: FusionMethod) -> Self {
        let (c, depths, heads) = match preset {
            Preset::SwinT => (96, [2, 2, 6, 2], [3, 6, 12, 24]),
            Preset::SwinS => (96, [2, 2, 18, 2], [3, 6, 12, 24]),
            Preset::SwinB => (128, [2, 2, 18, 2], [4, 8, 16, 32]),
            Preset::SwinL => (192, [2, 2, 18, 2], [6, 12, 24, 48]),
            Preset::Toy => return Self::toy(fusion),
        };
        SwinConfig {
            embed_dim: c,
            depths,
            heads,
            window: default_window(input),
            mlp_ratio: 4.0,
            input_h: input,
            input_w: input,
            num_keypoints: COCO_KEYPOINTS,
            fusion_method: fusion,
            fusion_channels: c,
            relative_position_bias: true,
        }
    }

    pub fn swin_l(input: usize, fusion: FusionMethod) -> Self {
        Self::preset(Preset::SwinL, input, fusion)
    }

    /// Desk-scale config: C=16, one block per stage, 64×64 input, M=4.
    pub fn toy(fusion: FusionMethod) -> Self {
        SwinConfig {
            embed_dim: 16,
            depths: [1, 1, 1, 1],
            heads: [1, 2, 4, 8],
            window: 4,
            mlp_ratio: 4.0,
            input_h: 64,
            input_w: 64,
            num_keypoints: COCO_KEYPOINTS,
            fusion_method: fusion,
            fusion_channels: 16,
            relative_position_bias: true,
        }
    }

    pub fn stage_channels(&self, stage: usize) -> usize {
        self.embed_dim << stage
    }

    /// Feature-map extent `(h, w)` of a stage.
    pub fn stage_extent(&self, stage: usize) -> (usize, usize) {
        let f = PATCH_SIZE << stage;
        (self.input_h / f, self.input_w / f)
    }

    pub fn heatmap_extent(&self) -> (usize, usize) {
        self.stage_extent(0)
    }

    /// Effective window and shift of a stage: the window is clamped to the
    /// feature extent and shifting is disabled once one window covers the map.
    pub fn stage_window(&self, stage: usize) -> (usize, usize) {
        let (h, w) = self.stage_extent(stage);
        let side = h.min(w);
        if side <= self.window {
            (side, 0)
        } else {
            (self.window, self.window / 2)
        }
    }

    pub fn mlp_hidden(&self, channels: usize) -> usize {
        (channels as f64 * self.mlp_ratio).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        let unit = PATCH_SIZE << 3;
        if self.input_h == 0 || self.input_w == 0 || !self.input_h.is_multiple_of(unit) || !self.input_w.is_multiple_of(unit) {
            return bad(format!(
                "input {}x{} must be a positive multiple of {unit} (patch size {PATCH_SIZE}, three merges)",
                self.input_h, self.input_w
            ));
        }
        if self.embed_dim == 0 || self.window == 0 || self.num_keypoints == 0 || self.fusion_channels == 0 {
            return bad("embed_dim, window, num_keypoints and fusion_channels must be positive".into());
        }
        if !(self.mlp_ratio > 0.0 && self.mlp_ratio.is_finite()) {
            return bad(format!("mlp_ratio must be positive, got {}", self.mlp_ratio));
        }
        for s in 0..4 {
            let (h, c) = (self.heads[s], self.stage_channels(s));
            if h == 0 || c % h != 0 {
                return bad(format!("stage {s}: {h} heads do not divide {c} channels"));
            }
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON encoding.
    pub fn fingerprint(&self) -> [u8; 32] {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        Sha256::digest(&bytes).into()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub lr: f64,
    pub milestones: Vec<usize>,
    pub decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            lr: 5e-5,
            milestones: vec![60, 120, 160],
            decay: 0.1,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl OptimizerConfig {
    /// Learning rate in effect during `epoch` (0-based).
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let passed = self.milestones.iter().filter(|&&m| epoch >= m).count();
        self.lr * self.decay.powi(passed as i32)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.lr)));
        }
        if !(self.decay > 0.0 && self.decay < 1.0) {
            return Err(Error::Config(format!("decay must lie in (0,1), got {}", self.decay)));
        }
        if self.milestones.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config(format!(
                "milestones must be strictly increasing, got {:?}",
                self.milestones
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PathsConfig {
    pub dataset: Option<String>,
    pub images: Option<String>,
    pub weights: Option<String>,
    pub output: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub model: SwinConfig,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default)]
    pub seed: u64,
    /// Gaussian target width in heatmap pixels; derived from the input size when absent.
    #[serde(default)]
    pub sigma: Option<f64>,
    #[serde(default = "default_mean")]
    pub pixel_mean: [f64; 3],
    #[serde(default = "default_std")]
    pub pixel_std: [f64; 3],
    /// Per-keypoint OKS falloff constants; COCO's published values when absent.
    #[serde(default)]
    pub oks_constants: Option<Vec<f64>>,
    #[serde(default)]
    pub paths: PathsConfig,
}

fn default_batch() -> usize {
    10
}
fn default_epochs() -> usize {
    240
}
fn default_mean() -> [f64; 3] {
    [0.485, 0.456, 0.406]
}
fn default_std() -> [f64; 3] {
    [0.229, 0.224, 0.225]
}

impl RunConfig {
    pub fn new(model: SwinConfig) -> Self {
        RunConfig {
            model,
            optimizer: OptimizerConfig::default(),
            batch_size: default_batch(),
            epochs: default_epochs(),
            seed: 0,
            sigma: None,
            pixel_mean: default_mean(),
            pixel_std: default_std(),
            oks_constants: None,
            paths: PathsConfig::default(),
        }
    }

    /// Explicit `sigma`, else the affine rule through 56 → 2 and 96 → 3
    /// heatmap rows, floored at 1.
    pub fn sigma(&self) -> f64 {
        self.sigma.unwrap_or_else(|| {
            let rows = self.model.heatmap_extent().0 as f64;
            (2.0 + (rows - 56.0) / 40.0).max(1.0)
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.optimizer.validate()?;
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if self.pixel_std.iter().any(|s| *s <= 0.0) {
            return Err(Error::Config("pixel_std entries must be positive".into()));
        }
        if let Some(s) = self.sigma {
            if s <= 0.0 {
                return Err(Error::Config(format!("sigma must be positive, got {s}")));
            }
        }
        if let Some(k) = &self.oks_constants {
            if k.len() != self.model.num_keypoints || k.iter().any(|v| *v <= 0.0) {
                return Err(Error::Config(format!(
                    "oks_constants needs {} positive values",
                    self.model.num_keypoints
                )));
            }
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn swin_l_preset_values() {
        let c = SwinConfig::swin_l(384, FusionMethod::Concat);
        assert_eq!(c.embed_dim, 192);
        assert_eq!(c.depths, [2, 2, 18, 2]);
        assert_eq!(c.heads, [6, 12, 24, 48]);
        assert_eq!(c.window, 12);
        c.validate().unwrap();
        assert_eq!(
            (0..4).map(|s| c.stage_extent(s)).collect::<Vec<_>>(),
            vec![(96, 96), (48, 48), (24, 24), (12, 12)]
        );
        assert_eq!(SwinConfig::swin_l(224, FusionMethod::Sum).window, 7);
    }

    #[test]
    fn toy_windows_clamp() {
        let c = SwinConfig::toy(FusionMethod::Sum);
        assert_eq!(c.stage_window(0), (4, 2));
        assert_eq!(c.stage_window(1), (4, 2));
        assert_eq!(c.stage_window(2), (4, 0));
        assert_eq!(c.stage_window(3), (2, 0));
    }

    #[test]
    fn validation_errors() {
        let mut c = SwinConfig::toy(FusionMethod::Sum);
        c.input_h = 60;
        assert!(c.validate().is_err());
        let mut c = SwinConfig::toy(FusionMethod::Sum);
        c.heads[1] = 3;
        assert!(c.validate().is_err());
        let mut o = OptimizerConfig::default();
        o.milestones = vec![10, 10];
        assert!(o.validate().is_err());
        o.milestones = vec![];
        o.decay = 1.0;
        assert!(o.validate().is_err());
    }

    #[test]
    fn schedule_milestones() {
        let o = OptimizerConfig::default();
        assert_eq!(o.lr_at(0), 5e-5);
        assert_eq!(o.lr_at(59), 5e-5);
        assert!((o.lr_at(60) - 5e-6).abs() < 1e-20);
        assert!((o.lr_at(120) - 5e-7).abs() < 1e-21);
        assert!((o.lr_at(160) - 5e-8).abs() < 1e-22);
        assert!((o.lr_at(239) - 5e-8).abs() < 1e-22);
    }

    #[test]
    fn fingerprint_tracks_config() {
        let a = SwinConfig::toy(FusionMethod::Sum);
        let b = SwinConfig::toy(FusionMethod::Concat);
        assert_eq!(a.fingerprint(), a.clone().fingerprint());
        assert_ne!(a.fingerprint(), b.fingerprint());
    }

    #[test]
    fn run_config_json_defaults() {
        let text = serde_json::json!({ "model": SwinConfig::toy(FusionMethod::Sum) }).to_string();
        let cfg = RunConfig::from_json(&text).unwrap();
        assert_eq!(cfg.epochs, 240);
        assert_eq!(cfg.batch_size, 10);
        assert_eq!(cfg.optimizer, OptimizerConfig::default());
        assert_eq!(cfg.sigma(), 1.0);
    }

    #[test]
    fn default_sigma_follows_heatmap_rows() {
        let at = |input| RunConfig::new(SwinConfig::swin_l(input, FusionMethod::Sum)).sigma();
        assert_eq!(at(224), 2.0);
        assert_eq!(at(384), 3.0);
        assert_eq!(RunConfig::new(SwinConfig::toy(FusionMethod::Sum)).sigma(), 1.0);
    }
}
