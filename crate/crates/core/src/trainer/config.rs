//! Training configuration, loaded from TOML.

use std::collections::BTreeMap;
use std::f64::consts::{PI, TAU};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{Result, TrainError};
use crate::body::{Region, SkeletonConfig};
use crate::field::FieldArch;
use crate::guidance::{ScheduleConfig, DEFAULT_GUIDANCE_SCALE};
use crate::losses::{LossOptions, LossWeights};
use crate::render::RenderSettings;

const DEFAULT_POSE_PRIOR: &str = include_str!("default_pose_prior.toml");

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub prompt: Option<String>,
    pub iterations: u64,
    pub seed: u64,
    /// Square image size in pixels.
    pub resolution: usize,
    /// Random rays per step for per-pixel guidance; `None` renders whole images.
    pub rays_per_step: Option<usize>,
    pub checkpoint_every: u64,
    /// Skeleton file; the embedded default when absent.
    pub skeleton: Option<PathBuf>,
    /// Overrides the skeleton's density sharpness.
    pub sharpness: Option<f64>,
    pub lr: LearningRates,
    pub loss: LossSection,
    pub camera: CameraRanges,
    pub zoom: ZoomProbabilities,
    pub lighting: LightingConfig,
    pub pose: PoseSamplerConfig,
    pub field: FieldArch,
    pub render: RenderSettings,
    pub guidance: GuidanceConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            prompt: None,
            iterations: 10_000,
            seed: 0,
            resolution: 64,
            rays_per_step: None,
            checkpoint_every: 500,
            skeleton: None,
            sharpness: None,
            lr: LearningRates::default(),
            loss: LossSection::default(),
            camera: CameraRanges::default(),
            zoom: ZoomProbabilities::default(),
            lighting: LightingConfig::default(),
            pose: PoseSamplerConfig::default(),
            field: FieldArch::default(),
            render: RenderSettings::default(),
            guidance: GuidanceConfig::default(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LearningRates {
    pub field: f64,
    pub shape: f64,
    pub lighting: f64,
    /// Cosine decay of every rate to zero over the run.
    pub cosine_decay: bool,
}

impl Default for LearningRates {
    fn default() -> Self {
        Self {
            field: 1e-3,
            shape: 1e-3,
            lighting: 1e-2,
            cosine_decay: false,
        }
    }
}

impl LearningRates {
    /// Multiplier applied at `step` of `total`.
    pub fn decay(&self, step: u64, total: u64) -> f64 {
        if !self.cosine_decay || total == 0 {
            return 1.0;
        }
        let x = (step as f64 / total as f64).min(1.0);
        0.5 * (1.0 + (PI * x).cos())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossSection {
    pub sds: f64,
    pub orientation: f64,
    pub proposal: f64,
    pub mask: f64,
    pub normal: f64,
    pub density: f64,
    pub squared_normal_loss: bool,
    /// Let the density loss move the body through its proxy; otherwise the
    /// proxy is a fixed target for the field.
    pub density_to_shape: bool,
}

impl Default for LossSection {
    fn default() -> Self {
        let w = LossWeights::default();
        Self {
            sds: w.sds,
            orientation: w.orientation,
            proposal: w.proposal,
            mask: w.mask,
            normal: w.normal,
            density: w.density,
            squared_normal_loss: false,
            density_to_shape: false,
        }
    }
}

impl LossSection {
    pub fn weights(&self) -> LossWeights {
        LossWeights {
            sds: self.sds,
            orientation: self.orientation,
            proposal: self.proposal,
            mask: self.mask,
            normal: self.normal,
            density: self.density,
        }
    }

    pub fn options(&self) -> LossOptions {
        LossOptions {
            squared_normal_loss: self.squared_normal_loss,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CameraRanges {
    pub azimuth: [f64; 2],
    pub elevation: [f64; 2],
    /// Camera distance for the full body; zoomed regions scale it by their size.
    pub radius: [f64; 2],
    /// Focal length in pixels at 64 px resolution.
    pub focal: [f64; 2],
    /// Fraction of the image spanned by the framed region.
    pub framing: [f64; 2],
}

impl Default for CameraRanges {
    fn default() -> Self {
        Self {
            azimuth: [0.0, TAU],
            elevation: [-PI / 9.0, PI / 3.0],
            radius: [1.5, 3.0],
            focal: [35.0, 70.0],
            framing: [0.7, 0.9],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ZoomProbabilities {
    pub full_body: f64,
    pub head: f64,
    pub upper_body: f64,
    pub lower_body: f64,
    pub midsection: f64,
    pub left_arm: f64,
    pub right_arm: f64,
}

impl Default for ZoomProbabilities {
    fn default() -> Self {
        let part = 1.0 / 12.0;
        Self {
            full_body: 0.5,
            head: part,
            upper_body: part,
            lower_body: part,
            midsection: part,
            left_arm: part,
            right_arm: part,
        }
    }
}

impl ZoomProbabilities {
    pub fn full_body_only() -> Self {
        Self {
            full_body: 1.0,
            head: 0.0,
            upper_body: 0.0,
            lower_body: 0.0,
            midsection: 0.0,
            left_arm: 0.0,
            right_arm: 0.0,
        }
    }

    pub fn entries(&self) -> [(Region, f64); 7] {
        [
            (Region::FullBody, self.full_body),
            (Region::Head, self.head),
            (Region::UpperBody, self.upper_body),
            (Region::LowerBody, self.lower_body),
            (Region::Midsection, self.midsection),
            (Region::LeftArm, self.left_arm),
            (Region::RightArm, self.right_arm),
        ]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LightingConfig {
    /// Probability of rendering a step under random lighting.
    pub p_rand: f64,
    /// Initial coefficients; uniform unit irradiance when absent.
    pub initial: Option<[f64; 10]>,
}

impl Default for LightingConfig {
    fn default() -> Self {
        Self {
            p_rand: 0.2,
            initial: None,
        }
    }
}

/// Truncated Gaussian prior on one joint's axis-angle components.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JointPrior {
    #[serde(default)]
    pub mean: [f64; 3],
    pub std: [f64; 3],
    pub min: [f64; 3],
    pub max: [f64; 3],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PoseSamplerConfig {
    /// Multiplies every standard deviation.
    #[serde(default = "unit")]
    pub std_scale: f64,
    /// Priors by joint name; unlisted joints stay at rest.
    #[serde(default = "default_joint_priors")]
    pub joints: BTreeMap<String, JointPrior>,
}

fn unit() -> f64 {
    1.0
}

fn default_joint_priors() -> BTreeMap<String, JointPrior> {
    PoseSamplerConfig::default().joints
}

impl Default for PoseSamplerConfig {
    fn default() -> Self {
        #[derive(Deserialize)]
        struct Embedded {
            std_scale: f64,
            joints: BTreeMap<String, JointPrior>,
        }
        let e: Embedded = toml::from_str(DEFAULT_POSE_PRIOR).expect("embedded pose prior parses");
        Self {
            std_scale: e.std_scale,
            joints: e.joints,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GuidanceConfig {
    /// Classifier-free guidance scale forwarded to the denoiser.
    pub scale: f64,
    /// Draws of (t, eps) averaged per step.
    pub samples: usize,
    /// Data spread of the built-in Gaussian denoiser.
    pub sigma: f64,
    pub schedule: ScheduleConfig,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        Self {
            scale: DEFAULT_GUIDANCE_SCALE,
            samples: 1,
            sigma: 0.0,
            schedule: ScheduleConfig::default(),
        }
    }
}

fn invalid(msg: impl Into<String>) -> TrainError {
    TrainError::InvalidConfig(msg.into())
}

fn check_range(name: &str, r: [f64; 2]) -> Result<()> {
    if r[0].is_finite() && r[1].is_finite() && r[0] <= r[1] {
        Ok(())
    } else {
        Err(invalid(format!("{name} range [{}, {}] is invalid", r[0], r[1])))
    }
}

impl TrainConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| invalid(e.to_string()))?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| invalid(format!("{}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.resolution == 0 {
            return Err(invalid("resolution must be >= 1"));
        }
        if self.rays_per_step == Some(0) {
            return Err(invalid("rays_per_step must be >= 1"));
        }
        for (name, v) in [("lr.field", self.lr.field), ("lr.shape", self.lr.shape), ("lr.lighting", self.lr.lighting)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(invalid(format!("{name} must be > 0, got {v}")));
            }
        }
        self.loss.weights().validate().map_err(|e| invalid(e.to_string()))?;
        check_range("camera.azimuth", self.camera.azimuth)?;
        check_range("camera.elevation", self.camera.elevation)?;
        check_range("camera.radius", self.camera.radius)?;
        check_range("camera.focal", self.camera.focal)?;
        check_range("camera.framing", self.camera.framing)?;
        if self.camera.radius[0] <= 0.0 || self.camera.focal[0] <= 0.0 {
            return Err(invalid("camera radius and focal must be positive"));
        }
        if self.camera.framing[0] <= 0.0 || self.camera.framing[1] > 1.0 {
            return Err(invalid("camera.framing must lie in (0, 1]"));
        }
        let probs = self.zoom.entries();
        if probs.iter().any(|(_, p)| !(*p >= 0.0 && p.is_finite())) {
            return Err(invalid("zoom probabilities must be >= 0"));
        }
        let sum: f64 = probs.iter().map(|(_, p)| p).sum();
        if (sum - 1.0).abs() > 1e-6 {
            return Err(invalid(format!("zoom probabilities sum to {sum}, expected 1")));
        }
        if !(0.0..=1.0).contains(&self.lighting.p_rand) {
            return Err(invalid(format!("lighting.p_rand {} outside [0, 1]", self.lighting.p_rand)));
        }
        if !(self.pose.std_scale >= 0.0 && self.pose.std_scale.is_finite()) {
            return Err(invalid("pose.std_scale must be >= 0"));
        }
        for (name, j) in &self.pose.joints {
            for k in 0..3 {
                if !(j.std[k] >= 0.0) || !(j.min[k] <= j.max[k]) || !(j.min[k] <= j.mean[k] && j.mean[k] <= j.max[k]) {
                    return Err(invalid(format!("pose prior for `{name}` is inconsistent on axis {k}")));
                }
            }
        }
        self.field.validate().map_err(|e| invalid(e.to_string()))?;
        self.render.validate().map_err(|e| invalid(e.to_string()))?;
        if self.guidance.samples == 0 {
            return Err(invalid("guidance.samples must be >= 1"));
        }
        if !(self.guidance.sigma >= 0.0) {
            return Err(invalid("guidance.sigma must be >= 0"));
        }
        Ok(())
    }

    /// Validation that also requires a prompt, for score-distillation runs.
    pub fn require_prompt(&self) -> Result<&str> {
        match self.prompt.as_deref() {
            Some(p) if !p.trim().is_empty() => Ok(p),
            _ => Err(TrainError::MissingField("prompt")),
        }
    }

    pub fn skeleton_config(&self) -> Result<SkeletonConfig> {
        let base = match &self.skeleton {
            Some(path) => SkeletonConfig::load(path).map_err(|e| invalid(e.to_string()))?,
            None => SkeletonConfig::default(),
        };
        match self.sharpness {
            Some(a) => base.with_sharpness(a).map_err(|e| invalid(e.to_string())),
            None => Ok(base),
        }
    }
}
