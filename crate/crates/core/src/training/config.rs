//! Run configuration and its plain-text `key = value` form.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::renderer::{Architecture, RendererConfig};
use crate::tensor::hex_string;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CoverageSpace {
    /// Texels touched by each frame's bilinear footprints.
    Texel,
    /// Image-space silhouette pixels.
    Silhouette,
}

/// Named ablation presets.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Two stages, normals, all losses, split optimization.
    Full,
    /// As `Full`, but texture and renderer optimized jointly on all frames.
    TwoStageNoSplit,
    /// One stage of matched capacity with normals at its input.
    SingleStage,
    /// Pixel and mask losses only, normals withheld.
    PixelOnly,
    /// Single stage, plain L1 on the full image, joint optimization.
    Dnr,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::Full,
        Variant::TwoStageNoSplit,
        Variant::SingleStage,
        Variant::PixelOnly,
        Variant::Dnr,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::TwoStageNoSplit => "two_stage_no_split",
            Variant::SingleStage => "single_stage",
            Variant::PixelOnly => "pixel_only",
            Variant::Dnr => "dnr",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown variant `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    pub steps: u64,
    /// Frames per optimization step (gradients are accumulated).
    pub batch_size: usize,
    pub lr_texture: f64,
    pub lr_renderer: f64,
    pub lr_disc: f64,
    /// Learning-rate multiplier reached at the last step, following a
    /// half-cosine from 1. 1 keeps rates constant.
    pub lr_final_scale: f64,
    /// Alternate renderer-only steps on non-keyframes with joint steps on
    /// keyframes. When off, every step updates both on any training frame.
    pub split_optimization: bool,
    /// Renderer-only steps per keyframe step.
    pub alternation_ratio: usize,
    pub keyframe_fraction: f64,
    /// Explicit keyframe budget; 0 derives it from `keyframe_fraction`.
    pub keyframe_budget: usize,
    pub keyframe_space: CoverageSpace,
    /// Stop selecting once this fraction of all coverable elements is
    /// covered; 0 disables the check.
    pub keyframe_saturation: f64,
    /// Square training crop; 0 trains on whole frames.
    pub crop_size: usize,
    pub rescale_min: f64,
    pub rescale_max: f64,
    pub uv_perturb: f64,
    /// Probability of eroding or dilating the supervision mask by a pixel.
    pub mask_noise: f64,
    pub texture_width: usize,
    pub texture_height: usize,
    pub texture_seed: u64,
    pub disc_scales: usize,
    pub disc_width: usize,
    pub feature_seed: u64,
    pub checkpoint_every: u64,
    pub weights: LossWeights,
    pub renderer: RendererConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            seed: 0,
            steps: 20_000,
            batch_size: 1,
            lr_texture: 1e-2,
            lr_renderer: 2e-4,
            lr_disc: 2e-4,
            lr_final_scale: 1.0,
            split_optimization: true,
            alternation_ratio: 1,
            keyframe_fraction: 0.075,
            keyframe_budget: 0,
            keyframe_space: CoverageSpace::Texel,
            keyframe_saturation: 0.0,
            crop_size: 0,
            rescale_min: 0.5,
            rescale_max: 1.25,
            uv_perturb: 0.02,
            mask_noise: 0.0,
            texture_width: 256,
            texture_height: 256,
            texture_seed: 0,
            disc_scales: 2,
            disc_width: 16,
            feature_seed: 0,
            checkpoint_every: 1000,
            weights: LossWeights::default(),
            renderer: RendererConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.batch_size == 0 || self.alternation_ratio == 0 {
            return Err(Error::invalid("steps, batch_size and alternation_ratio must be positive"));
        }
        for (name, lr) in [
            ("lr_texture", self.lr_texture),
            ("lr_renderer", self.lr_renderer),
            ("lr_disc", self.lr_disc),
        ] {
            if !(lr > 0.0 && lr.is_finite()) {
                return Err(Error::invalid(format!("{name} must be positive")));
            }
        }
        if !(self.lr_final_scale > 0.0 && self.lr_final_scale <= 1.0) {
            return Err(Error::invalid("lr_final_scale must lie in (0, 1]"));
        }
        if !(self.rescale_min > 0.0 && self.rescale_min <= self.rescale_max && self.rescale_max.is_finite()) {
            return Err(Error::invalid("rescale range must satisfy 0 < min <= max"));
        }
        if !(0.0..=1.0).contains(&self.keyframe_fraction) || !(0.0..=1.0).contains(&self.keyframe_saturation) {
            return Err(Error::invalid("keyframe fraction and saturation must lie in [0, 1]"));
        }
        if !(self.uv_perturb >= 0.0) || !(0.0..=1.0).contains(&self.mask_noise) {
            return Err(Error::invalid("uv_perturb must be >= 0 and mask_noise in [0, 1]"));
        }
        if self.texture_width == 0 || self.texture_height == 0 {
            return Err(Error::invalid("texture size must be positive"));
        }
        if self.disc_scales == 0 || self.disc_width == 0 {
            return Err(Error::invalid("discriminator scales and width must be positive"));
        }
        let m = self.renderer.size_multiple().max(4 << (self.disc_scales - 1));
        if !self.crop_size.is_multiple_of(m) {
            return Err(Error::invalid(format!("crop_size must be a multiple of {m}")));
        }
        if self.weights.feature_weights.len() != crate::losses::FEATURE_WIDTHS.len() {
            return Err(Error::invalid(format!(
                "feature_weights needs {} entries",
                crate::losses::FEATURE_WIDTHS.len()
            )));
        }
        self.weights.validate()?;
        self.renderer.validate()
    }

    /// Apply an ablation preset on top of this configuration.
    pub fn with_variant(mut self, variant: Variant) -> Self {
        let w = &mut self.weights;
        match variant {
            Variant::Full => {
                self.renderer.architecture = Architecture::TwoStage;
                self.renderer.use_normals = true;
                self.split_optimization = true;
            }
            Variant::TwoStageNoSplit => {
                self.renderer.architecture = Architecture::TwoStage;
                self.renderer.use_normals = true;
                self.split_optimization = false;
            }
            Variant::SingleStage => {
                self.renderer.architecture = Architecture::SingleStage;
                self.renderer.use_normals = true;
                self.split_optimization = true;
            }
            Variant::PixelOnly => {
                self.renderer.architecture = Architecture::TwoStage;
                self.renderer.use_normals = false;
                self.split_optimization = true;
                w.lambda_feat = 0.0;
                w.lambda_adv = 0.0;
                w.lambda_tv = 0.0;
            }
            Variant::Dnr => {
                self.renderer.architecture = Architecture::Dnr;
                self.renderer.dnr_mask = false;
                self.split_optimization = false;
                w.lambda_p = 1.0;
                w.lambda_feat = 0.0;
                w.lambda_mask = 0.0;
                w.lambda_adv = 0.0;
                w.lambda_tv = 0.0;
            }
        }
        self
    }

    pub fn model_type(&self) -> &'static str {
        if self.renderer.architecture == Architecture::Dnr {
            "dnr"
        } else {
            "anr"
        }
    }

    pub fn to_text(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let cfg: TrainConfig = toml::from_str(text).map_err(|e| Error::format("config", e.to_string()))?;
        Ok(cfg)
    }

    /// Learning-rate multiplier for step `step` (0-based).
    pub fn lr_scale(&self, step: u64) -> f64 {
        let t = (step as f64 / self.steps.max(1) as f64).min(1.0);
        let c = 0.5 * (1.0 + (std::f64::consts::PI * t).cos());
        self.lr_final_scale + (1.0 - self.lr_final_scale) * c
    }

    /// SHA-256 of the canonical text form.
    pub fn hash(&self) -> String {
        hex_string(&Sha256::digest(self.to_text().as_bytes()))
    }

    /// Keyframe budget for a sequence with `train_frames` training frames.
    pub fn budget_for(&self, train_frames: usize) -> usize {
        if self.keyframe_budget > 0 {
            self.keyframe_budget
        } else {
            ((self.keyframe_fraction * train_frames as f64).floor() as usize).max(1)
        }
    }
}
