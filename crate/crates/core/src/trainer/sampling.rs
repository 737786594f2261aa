//! Per-step random draws: zoom region, pose, camera with prompt, lighting.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::config::{CameraRanges, PoseSamplerConfig, ZoomProbabilities};
use super::{Result, TrainError};
use crate::body::{Pose, PosedBody, Region, SkeletonConfig};
use crate::guidance::{GuidancePrompt, ViewQualifier};
use crate::math::{Aabb, Vec3};
use crate::render::{Camera, ShLighting, SH_COEFFS};

const MAX_REJECTIONS: usize = 10_000;

pub fn sample_region<R: Rng + ?Sized>(rng: &mut R, zoom: &ZoomProbabilities) -> Region {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    let entries = zoom.entries();
    for (region, p) in entries {
        acc += p;
        if u < acc {
            return region;
        }
    }
    entries.iter().rev().find(|(_, p)| *p > 0.0).map_or(Region::FullBody, |(r, _)| *r)
}

/// Draws `N(mean, std^2)` conditioned on `[min, max]` by rejection.
pub fn truncated_normal<R: Rng + ?Sized>(rng: &mut R, mean: f64, std: f64, min: f64, max: f64) -> f64 {
    if std == 0.0 || min == max {
        return mean.clamp(min, max);
    }
    for _ in 0..MAX_REJECTIONS {
        let z: f64 = StandardNormal.sample(rng);
        let v = mean + std * z;
        if (min..=max).contains(&v) {
            return v;
        }
    }
    mean.clamp(min, max)
}

/// Truncated-Gaussian pose prior resolved against a skeleton.
#[derive(Clone, Debug)]
pub struct PoseSampler {
    joints: usize,
    /// `(joint index, mean, std, min, max)` per prior.
    priors: Vec<(usize, [f64; 3], [f64; 3], [f64; 3], [f64; 3])>,
}

impl PoseSampler {
    pub fn new(cfg: &PoseSamplerConfig, skeleton: &SkeletonConfig) -> Result<Self> {
        let mut priors = Vec::with_capacity(cfg.joints.len());
        for (name, p) in &cfg.joints {
            let j = skeleton
                .bone_index(name)
                .ok_or_else(|| TrainError::InvalidConfig(format!("pose prior names unknown joint `{name}`")))?;
            let std = p.std.map(|s| s * cfg.std_scale);
            priors.push((j, p.mean, std, p.min, p.max));
        }
        Ok(Self {
            joints: skeleton.joint_count(),
            priors,
        })
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Pose<f64> {
        let mut pose = Pose::rest(self.joints);
        for &(j, mean, std, min, max) in &self.priors {
            let mut w = [0.0; 3];
            for k in 0..3 {
                w[k] = truncated_normal(rng, mean[k], std[k], min[k], max[k]);
            }
            pose.joint_rotations[j] = Vec3::from_f64(w);
        }
        pose
    }

    /// Whether every prior component of `pose` lies within its limits.
    pub fn within_limits(&self, pose: &Pose<f64>) -> bool {
        self.priors.iter().all(|&(j, _, _, min, max)| {
            let w = pose.joint_rotations[j].to_array();
            (0..3).all(|k| w[k] >= min[k] && w[k] <= max[k])
        })
    }
}

/// Largest fraction of the image width or height spanned by the projected box,
/// or `None` if a corner falls behind the camera.
pub fn framing_fraction(camera: &Camera<f64>, bounds: &Aabb<f64>) -> Option<f64> {
    let mut lo = [f64::INFINITY; 2];
    let mut hi = [f64::NEG_INFINITY; 2];
    for c in bounds.corners() {
        let (u, v) = camera.project(c)?;
        lo[0] = lo[0].min(u);
        lo[1] = lo[1].min(v);
        hi[0] = hi[0].max(u);
        hi[1] = hi[1].max(v);
    }
    Some(((hi[0] - lo[0]) / camera.width as f64).max((hi[1] - lo[1]) / camera.height as f64))
}

fn half_diagonal(b: &Aabb<f64>) -> f64 {
    b.extent().norm() * 0.5
}

/// Radius at which `bounds` fills `target` of the frame, by bisection on the
/// monotone projected extent.
fn solve_radius(mut cam: Camera<f64>, bounds: &Aabb<f64>, target: f64) -> f64 {
    let mut lo = half_diagonal(bounds) * 1.001;
    let mut hi = lo * 1e3;
    for _ in 0..80 {
        let mid = 0.5 * (lo + hi);
        cam.radius = mid;
        match framing_fraction(&cam, bounds) {
            Some(f) if f <= target => hi = mid,
            _ => lo = mid,
        }
    }
    hi
}

#[derive(Clone, Debug, PartialEq)]
pub struct CameraSample {
    pub camera: Camera<f64>,
    pub prompt: GuidancePrompt,
    /// Target framing fraction that was drawn.
    pub framing: f64,
}

/// Spherical camera aimed at the region's box center, placed so the box spans
/// a uniform draw from `ranges.framing` of the image.
///
/// The radius is kept inside `ranges.radius` scaled by the region's size
/// relative to the full body; when the framing solve leaves that interval the
/// radius is clamped and the focal length rescaled instead.
pub fn sample_camera_and_prompt<R: Rng + ?Sized>(
    rng: &mut R,
    ranges: &CameraRanges,
    resolution: usize,
    body: &PosedBody<f64>,
    region: Region,
    base_prompt: &str,
) -> CameraSample {
    let uniform = |rng: &mut R, r: [f64; 2]| if r[0] < r[1] { rng.gen_range(r[0]..r[1]) } else { r[0] };
    let azimuth = uniform(rng, ranges.azimuth);
    let elevation = uniform(rng, ranges.elevation);
    let focal = uniform(rng, ranges.focal) * resolution as f64 / 64.0;
    let framing = uniform(rng, ranges.framing);

    let bounds = body.region_bounds(region);
    let full = body.region_bounds(Region::FullBody);
    let scale = half_diagonal(&bounds) / half_diagonal(&full);
    let (r_min, r_max) = (ranges.radius[0] * scale, ranges.radius[1] * scale);

    let mut camera = Camera {
        azimuth,
        elevation,
        radius: 1.0,
        look_at: bounds.center(),
        focal,
        width: resolution,
        height: resolution,
    };
    let r = solve_radius(camera, &bounds, framing);
    camera.radius = r.clamp(r_min.max(half_diagonal(&bounds) * 1.001), r_max.max(half_diagonal(&bounds) * 1.001));
    if camera.radius != r {
        if let Some(f) = framing_fraction(&camera, &bounds) {
            camera.focal *= framing / f;
        }
    }
    let view = ViewQualifier::from_angles(azimuth, elevation);
    CameraSample {
        camera,
        prompt: GuidancePrompt::new(base_prompt, region, view),
        framing,
    }
}

/// Random lighting: irradiance DC in `[0.8, 1.5]`, bands 1-2 in `[-0.3, 0.3]`,
/// ambient in `[0, 0.2]`.
pub fn random_lighting<R: Rng + ?Sized>(rng: &mut R) -> ShLighting<f64> {
    let mut h = ShLighting::uniform(rng.gen_range(0.8..1.5));
    for c in &mut h.coeffs[1..SH_COEFFS - 1] {
        *c = rng.gen_range(-0.3..0.3);
    }
    h.coeffs[SH_COEFFS - 1] = rng.gen_range(0.0..0.2);
    h
}

/// Returns the lighting for a step and whether it was drawn at random.
pub fn sample_lighting<R: Rng + ?Sized>(rng: &mut R, optimized: &ShLighting<f64>, p_rand: f64) -> (ShLighting<f64>, bool) {
    if p_rand > 0.0 && rng.gen::<f64>() < p_rand {
        (random_lighting(rng), true)
    } else {
        (*optimized, false)
    }
}
