//! Ray generation, proposal resampling, compositing, SH shading and image output.

mod camera;
mod composite;
mod image;
mod pipeline;
mod sampling;
mod sh;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use camera::{Camera, Ray};
pub use composite::{composite, composite_backward, composite_weights, Composite, CompositeGrad};
pub use image::Image;
pub use pipeline::{
    backward_ray, backward_rays, render, render_pixels, trace_ray, GradSink, RadianceSource,
    RayRecord, RaySamples, RayUpstream, RenderOutput, Scene,
};
pub use sampling::{coarse_edges, propose_and_resample, resample, Histogram, ProposalSamples, Resampled, PDF_FLOOR};
pub use sh::{sh_basis, sh_basis_grad, ShLighting, ShadeGrad, SH_BASIS, SH_COEFFS};

#[derive(Debug, thiserror::Error)]
pub enum RenderError {
    #[error("invalid camera: {0}")]
    InvalidCamera(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid render settings: {0}")]
    InvalidSettings(String),
    #[error("unknown render mode `{0}`")]
    UnknownMode(String),
    #[error("image i/o: {0}")]
    Io(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RenderMode {
    Shaded,
    Albedo,
    Normals,
    Mask,
}

impl RenderMode {
    pub fn name(self) -> &'static str {
        match self {
            RenderMode::Shaded => "shaded",
            RenderMode::Albedo => "albedo",
            RenderMode::Normals => "normals",
            RenderMode::Mask => "mask",
        }
    }
}

impl fmt::Display for RenderMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for RenderMode {
    type Err = RenderError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        [RenderMode::Shaded, RenderMode::Albedo, RenderMode::Normals, RenderMode::Mask]
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| RenderError::UnknownMode(s.to_string()))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RenderSettings {
    pub n_coarse: usize,
    pub n_fine: usize,
    /// Central-difference step for density normals (m).
    pub normal_step: f64,
    /// Density normals are only estimated where the sample weight exceeds this.
    pub weight_cutoff: f64,
    /// Shade with density normals instead of the predicted normals.
    pub shade_with_density_normals: bool,
}

impl Default for RenderSettings {
    fn default() -> Self {
        Self {
            n_coarse: 64,
            n_fine: 32,
            normal_step: 1e-3,
            weight_cutoff: 1e-4,
            shade_with_density_normals: false,
        }
    }
}

impl RenderSettings {
    pub fn validate(&self) -> Result<(), RenderError> {
        if self.n_coarse == 0 || self.n_fine == 0 {
            return Err(RenderError::InvalidSettings("sample counts must be >= 1".into()));
        }
        if !(self.normal_step > 0.0 && self.normal_step.is_finite()) {
            return Err(RenderError::InvalidSettings("normal step must be > 0".into()));
        }
        if !(self.weight_cutoff >= 0.0) {
            return Err(RenderError::InvalidSettings("weight cutoff must be >= 0".into()));
        }
        Ok(())
    }
}
