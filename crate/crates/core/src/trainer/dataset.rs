//! Posed target views for photometric guidance.
//!
//! On disk a dataset is a directory with `views.json` and one PFM image per view.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::{CameraRanges, PoseSamplerConfig};
use super::sampling::{sample_camera_and_prompt, PoseSampler};
use super::{Result, TrainError};
use crate::body::{Pose, PosedBody, Region, Shape, SkeletonConfig};
use crate::procedural::ProceduralAvatar;
use crate::render::{render, Camera, Image, RenderMode, RenderSettings, Scene, ShLighting};

#[derive(Clone, Debug, PartialEq)]
pub struct TargetView {
    pub pose: Pose<f64>,
    pub camera: Camera<f64>,
    /// RGB target, `camera.width x camera.height`.
    pub image: Image<f32>,
    /// Ground-truth opacity, when known.
    pub mask: Option<Image<f32>>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub views: Vec<TargetView>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ViewEntry {
    pose: Pose<f64>,
    camera: Camera<f64>,
    image: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    mask: Option<String>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    views: Vec<ViewEntry>,
}

fn dataset_err(msg: impl Into<String>) -> TrainError {
    TrainError::Dataset(msg.into())
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.views.len()
    }

    pub fn is_empty(&self) -> bool {
        self.views.is_empty()
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let mut entries = Vec::with_capacity(self.views.len());
        for (i, v) in self.views.iter().enumerate() {
            let image = format!("view_{i:04}.pfm");
            v.image.write_pfm(&dir.join(&image)).map_err(|e| dataset_err(e.to_string()))?;
            let mask = match &v.mask {
                Some(m) => {
                    let name = format!("mask_{i:04}.pfm");
                    m.write_pfm(&dir.join(&name)).map_err(|e| dataset_err(e.to_string()))?;
                    Some(name)
                }
                None => None,
            };
            entries.push(ViewEntry {
                pose: v.pose.clone(),
                camera: v.camera,
                image,
                mask,
            });
        }
        let text = serde_json::to_string_pretty(&Manifest { views: entries }).expect("manifest serializes");
        fs::write(dir.join("views.json"), text)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("views.json");
        let text = fs::read_to_string(&path).map_err(|e| dataset_err(format!("{}: {e}", path.display())))?;
        let manifest: Manifest = serde_json::from_str(&text).map_err(|e| dataset_err(format!("{}: {e}", path.display())))?;
        let mut views = Vec::with_capacity(manifest.views.len());
        for entry in manifest.views {
            let read = |name: &str| Image::<f32>::read_pfm(&dir.join(name)).map_err(|e| dataset_err(format!("{name}: {e}")));
            let image = read(&entry.image)?;
            let mask = entry.mask.as_deref().map(read).transpose()?;
            let view = TargetView {
                pose: entry.pose,
                camera: entry.camera,
                image,
                mask,
            };
            view.validate()?;
            views.push(view);
        }
        if views.is_empty() {
            return Err(dataset_err(format!("{} lists no views", path.display())));
        }
        Ok(Self { views })
    }
}

impl TargetView {
    pub fn validate(&self) -> Result<()> {
        self.camera.validate().map_err(|e| dataset_err(e.to_string()))?;
        let (w, h) = (self.camera.width, self.camera.height);
        if self.image.width != w || self.image.height != h || self.image.channels != 3 {
            return Err(dataset_err(format!(
                "image is {}x{}x{}, camera expects {w}x{h}x3",
                self.image.width, self.image.height, self.image.channels
            )));
        }
        if let Some(m) = &self.mask {
            if m.width != w || m.height != h || m.channels != 1 {
                return Err(dataset_err("mask does not match the camera"));
            }
        }
        Ok(())
    }
}

/// Renders the procedural avatar at mean shape; returns color and mask.
pub fn render_procedural(
    skeleton: &SkeletonConfig,
    avatar: &ProceduralAvatar<f64>,
    pose: &Pose<f64>,
    camera: &Camera<f64>,
    lighting: &ShLighting<f64>,
    settings: &RenderSettings,
) -> Result<(Image<f32>, Image<f32>)> {
    let body = PosedBody::new(skeleton, pose, &Shape::mean())?;
    let scene = Scene {
        body: &body,
        lighting,
        settings,
        mode: RenderMode::Shaded,
        density_normals: false,
    };
    let out = render(&scene, avatar, camera)?;
    Ok((out.color.cast(), out.mask.cast()))
}

/// Options for [`procedural_dataset`].
#[derive(Clone, Debug)]
pub struct ProceduralDatasetSpec {
    pub views: usize,
    pub resolution: usize,
    pub seed: u64,
    pub camera: CameraRanges,
    pub pose: PoseSamplerConfig,
    pub lighting: ShLighting<f64>,
    pub settings: RenderSettings,
}

impl Default for ProceduralDatasetSpec {
    fn default() -> Self {
        Self {
            views: 64,
            resolution: 64,
            seed: 0,
            camera: CameraRanges::default(),
            pose: PoseSamplerConfig::default(),
            lighting: ShLighting::uniform(1.0),
            settings: RenderSettings::default(),
        }
    }
}

/// Full-body views of the procedural avatar under sampled poses and cameras.
pub fn procedural_dataset(skeleton: &SkeletonConfig, spec: &ProceduralDatasetSpec) -> Result<Dataset> {
    let avatar = ProceduralAvatar::new(skeleton);
    let sampler = PoseSampler::new(&spec.pose, skeleton)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut views = Vec::with_capacity(spec.views);
    for _ in 0..spec.views {
        let pose = sampler.sample(&mut rng);
        let body = PosedBody::new(skeleton, &pose, &Shape::mean())?;
        let cam = sample_camera_and_prompt(&mut rng, &spec.camera, spec.resolution, &body, Region::FullBody, "");
        let (image, mask) = render_procedural(skeleton, &avatar, &pose, &cam.camera, &spec.lighting, &spec.settings)?;
        views.push(TargetView {
            pose,
            camera: cam.camera,
            image,
            mask: Some(mask),
        });
    }
    Ok(Dataset { views })
}
