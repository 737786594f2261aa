//! The optimization loop: per-step sampling, rendering, guidance, auxiliary
//! losses and Adam updates of the field, the shape and the lighting.

mod adam;
mod checkpoint;
mod config;
mod dataset;
mod sampling;

pub use adam::{AdamMoments, AdamOutcome, BETA1, BETA2, EPSILON};
pub use checkpoint::{Checkpoint, CheckpointError, CheckpointMeta, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use config::{
    CameraRanges, GuidanceConfig, JointPrior, LearningRates, LightingConfig, LossSection, PoseSamplerConfig, TrainConfig,
    ZoomProbabilities,
};
pub use dataset::{procedural_dataset, render_procedural, Dataset, ProceduralDatasetSpec, TargetView};
pub use sampling::{
    framing_fraction, random_lighting, sample_camera_and_prompt, sample_lighting, sample_region, truncated_normal,
    CameraSample, PoseSampler,
};

use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::body::{BodyError, Pose, PosedBody, Region, Shape, SkeletonConfig, SHAPE_DIM};
use crate::field::{FieldError, FieldParams};
use crate::guidance::{
    sds_gradient, AnalyticGaussianDenoiser, Denoiser, DiffusionSchedule, GuidanceError, GuidanceSpec, RemoteDenoiser,
    SdsRequest,
};
use crate::losses::{accumulate_ray_losses, total_loss, LossBreakdown, LossError, MetricsRecord, MetricsWriter};
use crate::math::Vec3;
use crate::render::{
    backward_rays, render, render_pixels, Camera, Image, RayUpstream, RenderError, RenderMode, RenderOutput, RenderSettings, Scene,
    ShLighting,
};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("missing required config field `{0}`")]
    MissingField(&'static str),
    #[error("dataset: {0}")]
    Dataset(String),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Guidance(#[from] GuidanceError),
    #[error(transparent)]
    Render(#[from] RenderError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Field(#[from] FieldError),
    #[error(transparent)]
    Body(#[from] BodyError),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = TrainError> = std::result::Result<T, E>;

/// Everything the optimizer mutates.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub params: FieldParams<f32>,
    pub shape: Shape<f32>,
    pub lighting: ShLighting<f32>,
    pub field_moments: AdamMoments,
    pub shape_moments: AdamMoments,
    pub lighting_moments: AdamMoments,
    pub step: u64,
    pub rng: ChaCha8Rng,
}

impl PartialEq for TrainState {
    fn eq(&self, o: &Self) -> bool {
        let bits = |v: &[f32]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        bits(&self.params.values) == bits(&o.params.values)
            && self.params.arch() == o.params.arch()
            && bits(&self.shape.beta) == bits(&o.shape.beta)
            && bits(&self.lighting.coeffs) == bits(&o.lighting.coeffs)
            && self.field_moments == o.field_moments
            && self.shape_moments == o.shape_moments
            && self.lighting_moments == o.lighting_moments
            && self.step == o.step
            && self.rng == o.rng
    }
}

impl TrainState {
    /// Fresh state: initialized field, mean shape, configured lighting.
    pub fn init(config: &TrainConfig) -> Result<Self> {
        let params = FieldParams::init(config.seed, &config.field)?;
        let lighting = match config.lighting.initial {
            Some(c) => ShLighting { coeffs: c.map(|v| v as f32) },
            None => ShLighting::uniform(1.0),
        };
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(1);
        Ok(Self {
            field_moments: AdamMoments::zeros(params.len()),
            shape_moments: AdamMoments::zeros(SHAPE_DIM),
            lighting_moments: AdamMoments::zeros(lighting.coeffs.len()),
            params,
            shape: Shape::mean(),
            lighting,
            step: 0,
            rng,
        })
    }

    pub fn is_finite(&self) -> bool {
        self.params.is_finite()
            && self.shape.beta.iter().all(|b| b.is_finite())
            && self.lighting.is_finite()
            && [&self.field_moments, &self.shape_moments, &self.lighting_moments]
                .iter()
                .all(|m| m.m.iter().chain(&m.v).all(|x| x.is_finite()))
    }
}

/// Source of the image-space gradient.
pub enum Guidance {
    /// Reconstruct posed target views; each step draws one view.
    Photometric(Dataset),
    /// Score distillation against a noise predictor.
    Diffusion {
        denoiser: Box<dyn Denoiser<f32> + Send>,
        schedule: DiffusionSchedule,
    },
}

impl Guidance {
    /// Builds guidance from a command-line spec.
    pub fn from_spec(spec: &GuidanceSpec, config: &TrainConfig) -> Result<Self> {
        let schedule = DiffusionSchedule::new(config.guidance.schedule.clone())?;
        Ok(match spec {
            GuidanceSpec::Photometric(dir) => Guidance::Photometric(Dataset::load(dir)?),
            GuidanceSpec::Gaussian(path) => {
                let mean = read_image(path)?;
                if mean.width != config.resolution || mean.height != config.resolution || mean.channels != 3 {
                    return Err(TrainError::InvalidConfig(format!(
                        "mean image is {}x{}x{}, resolution is {}",
                        mean.width, mean.height, mean.channels, config.resolution
                    )));
                }
                let den = AnalyticGaussianDenoiser::new(mean, config.guidance.sigma, schedule.clone())?;
                Guidance::Diffusion {
                    denoiser: Box::new(den),
                    schedule,
                }
            }
            GuidanceSpec::Remote(endpoint) => {
                let den = RemoteDenoiser::new(endpoint.clone());
                den.check_reachable()?;
                Guidance::Diffusion {
                    denoiser: Box::new(den),
                    schedule,
                }
            }
        })
    }
}

fn read_image(path: &Path) -> Result<Image<f32>> {
    let img = match path.extension().and_then(|e| e.to_str()) {
        Some("pfm") => Image::<f32>::read_pfm(path),
        _ => Image::<f32>::read_png(path),
    };
    img.map_err(|e| TrainError::InvalidConfig(format!("{}: {e}", path.display())))
}

/// What a step drew and produced.
#[derive(Clone, Debug, PartialEq)]
pub struct StepReport {
    pub step: u64,
    pub breakdown: LossBreakdown,
    pub region: Region,
    pub prompt: Option<String>,
    pub pose: Pose<f64>,
    pub camera: Camera<f64>,
    pub random_lighting: bool,
    /// Half mean squared error against the target view, for photometric steps.
    pub photometric: Option<f64>,
    /// Parameter groups whose update was skipped for non-finite gradients.
    pub skipped: Vec<&'static str>,
}

impl StepReport {
    pub fn metrics(&self) -> MetricsRecord {
        let mut rec = MetricsRecord::new(self.step, &self.breakdown);
        rec.region = Some(self.region.name().to_string());
        rec.prompt = self.prompt.clone();
        rec.skipped = !self.skipped.is_empty();
        rec
    }
}

/// Gradients of one step, before the optimizer.
#[derive(Clone, Debug)]
pub struct StepGradients {
    pub field: Vec<f32>,
    pub shape: [f32; SHAPE_DIM],
    pub lighting: Vec<f32>,
}

pub struct Trainer {
    config: TrainConfig,
    skeleton: SkeletonConfig,
    pose_sampler: PoseSampler,
    guidance: Guidance,
    pub state: TrainState,
}

fn l2(v: impl Iterator<Item = f32>) -> f64 {
    v.map(|x| (x as f64) * (x as f64)).sum::<f64>().sqrt()
}

impl Trainer {
    pub fn new(config: TrainConfig, guidance: Guidance) -> Result<Self> {
        let state = TrainState::init(&config)?;
        Self::with_state(config, guidance, state)
    }

    pub fn with_state(config: TrainConfig, guidance: Guidance, state: TrainState) -> Result<Self> {
        config.validate()?;
        let skeleton = config.skeleton_config()?;
        if config.field.joints != skeleton.joint_count() {
            return Err(TrainError::InvalidConfig(format!(
                "field.joints is {} but the skeleton has {} joints",
                config.field.joints,
                skeleton.joint_count()
            )));
        }
        if state.params.arch() != &config.field {
            return Err(TrainError::InvalidConfig("checkpoint architecture differs from field config".into()));
        }
        if let Guidance::Diffusion { .. } = guidance {
            config.require_prompt()?;
        }
        let pose_sampler = PoseSampler::new(&config.pose, &skeleton)?;
        Ok(Self {
            config,
            skeleton,
            pose_sampler,
            guidance,
            state,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn skeleton(&self) -> &SkeletonConfig {
        &self.skeleton
    }

    pub fn guidance(&self) -> &Guidance {
        &self.guidance
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::new(self.state.clone(), &self.skeleton, self.config.prompt.clone())
    }

    /// Renders the current state and returns gradients without updating.
    ///
    /// Draws from `rng`, which the caller commits only on success.
    pub fn compute_gradients(&mut self, rng: &mut ChaCha8Rng) -> Result<(StepReport, StepGradients)> {
        let cfg = &self.config;
        let state = &self.state;
        let shape64 = state.shape.cast::<f64>();

        let (region, pose, camera, prompt, target) = match &self.guidance {
            Guidance::Photometric(data) => {
                if data.is_empty() {
                    return Err(TrainError::Dataset("no target views".into()));
                }
                let i = rng.gen_range(0..data.len());
                (Region::FullBody, data.views[i].pose.clone(), data.views[i].camera, None, Some(i))
            }
            Guidance::Diffusion { .. } => {
                let region = sample_region(rng, &cfg.zoom);
                let pose = self.pose_sampler.sample(rng);
                let body64 = PosedBody::new(&self.skeleton, &pose, &shape64)?;
                let base = cfg.require_prompt()?;
                let cam = sample_camera_and_prompt(rng, &cfg.camera, cfg.resolution, &body64, region, base);
                (region, pose, cam.camera, Some(cam.prompt.composed()), None)
            }
        };
        let (lighting64, random_lighting) = sample_lighting(rng, &state.lighting.cast(), cfg.lighting.p_rand);
        let lighting = lighting64.cast::<f32>();

        let camera32 = camera.cast::<f32>();
        let n_pixels = camera32.pixel_count();
        let pixels: Vec<usize> = match (target.is_some(), cfg.rays_per_step) {
            (true, Some(n)) if n < n_pixels => index::sample(rng, n_pixels, n).into_vec(),
            _ => (0..n_pixels).collect(),
        };
        let jitter_seed: u64 = rng.gen();

        let weights = cfg.loss.weights();
        let pose32 = pose.cast::<f32>();
        let body = PosedBody::new(&self.skeleton, &pose32, &state.shape)?;
        let ev = state.params.evaluator(&pose32, &state.shape)?;
        let scene = Scene {
            body: &body,
            lighting: &lighting,
            settings: &cfg.render,
            mode: RenderMode::Shaded,
            density_normals: weights.normal > 0.0 || weights.orientation > 0.0,
        };
        let records = render_pixels(&scene, &ev, &camera32, &pixels, Some(jitter_seed));

        let scale = (weights.sds / pixels.len() as f64) as f32;
        let mut pixel_grad: Vec<Vec3<f32>> = vec![Vec3::zero(); records.len()];
        let photometric = match (&self.guidance, target) {
            (Guidance::Photometric(data), Some(i)) => {
                let view = &data.views[i];
                let sq: f64 = records
                    .iter()
                    .map(|r| (r.color - view.image.rgb(r.pixel)).cast::<f64>().norm_squared())
                    .sum();
                Some(0.5 * sq / (3 * records.len()) as f64)
            }
            _ => None,
        };
        if weights.sds > 0.0 {
            match (&mut self.guidance, target) {
                (Guidance::Photometric(data), Some(i)) => {
                    let view = &data.views[i];
                    for (g, r) in pixel_grad.iter_mut().zip(&records) {
                        *g = (r.color - view.image.rgb(r.pixel)) * scale;
                    }
                }
                (Guidance::Diffusion { denoiser, schedule }, None) => {
                    let mut u = Image::new(camera32.width, camera32.height, 3);
                    for r in &records {
                        u.set_rgb(r.pixel, r.color);
                    }
                    let prompt = prompt.as_deref().unwrap_or_default();
                    let request = SdsRequest {
                        prompt,
                        scale: cfg.guidance.scale,
                    };
                    let sds = sds_gradient(&u, denoiser.as_mut(), &request, rng, schedule, cfg.guidance.samples)?;
                    for (g, r) in pixel_grad.iter_mut().zip(&records) {
                        *g = sds.grad.rgb(r.pixel) * scale;
                    }
                }
                _ => unreachable!("photometric steps always have a target"),
            }
        }

        let mut upstream: Vec<RayUpstream<f32>> = records
            .iter()
            .zip(&pixel_grad)
            .map(|(r, g)| {
                let (nf, nc) = r.samples.as_ref().map_or((0, 0), |s| (s.t.len(), s.coarse.bins()));
                let mut up = RayUpstream::zeros(nf, nc);
                up.color = *g;
                up
            })
            .collect();
        let (terms, mut norms) = accumulate_ray_losses(&records, &weights, &cfg.loss.options(), &mut upstream)?;
        if !cfg.loss.density_to_shape {
            for up in &mut upstream {
                up.tau_proxy.iter_mut().for_each(|g| *g = 0.0);
            }
        }
        norms.sds = l2(pixel_grad.iter().flat_map(|g| g.to_array()));

        let mut sink = backward_rays(&scene, &ev, &records, &upstream)?;
        let dbeta_cond = ev.finalize(&mut sink.field);
        let mut shape_grad = sink.shape;
        for (a, b) in shape_grad.iter_mut().zip(dbeta_cond) {
            *a += b;
        }
        let lighting_grad = if random_lighting {
            vec![0.0; sink.lighting.len()]
        } else {
            sink.lighting.to_vec()
        };

        let report = StepReport {
            step: state.step + 1,
            breakdown: total_loss(&terms, &weights, norms),
            region,
            prompt,
            pose,
            camera,
            random_lighting,
            photometric,
            skipped: Vec::new(),
        };
        let grads = StepGradients {
            field: sink.field.params,
            shape: shape_grad,
            lighting: lighting_grad,
        };
        Ok((report, grads))
    }

    /// One optimization step. On error the state is left untouched.
    pub fn step(&mut self) -> Result<StepReport> {
        let mut rng = self.state.rng.clone();
        let (mut report, grads) = self.compute_gradients(&mut rng)?;
        let cfg = &self.config;
        let decay = cfg.lr.decay(self.state.step, cfg.iterations);
        let s = &mut self.state;
        if s.field_moments.update(&mut s.params.values, &grads.field, cfg.lr.field * decay) == AdamOutcome::Skipped {
            report.skipped.push("field");
        }
        if s.shape_moments.update(&mut s.shape.beta, &grads.shape, cfg.lr.shape * decay) == AdamOutcome::Skipped {
            report.skipped.push("shape");
        }
        if !report.random_lighting
            && s.lighting_moments.update(&mut s.lighting.coeffs, &grads.lighting, cfg.lr.lighting * decay)
                == AdamOutcome::Skipped
        {
            report.skipped.push("lighting");
        }
        s.shape.project();
        s.rng = rng;
        s.step += 1;
        Ok(report)
    }
}

/// Renders a trained state without jitter.
pub fn render_state(
    state: &TrainState,
    skeleton: &SkeletonConfig,
    pose: &Pose<f64>,
    camera: &Camera<f64>,
    settings: &RenderSettings,
    mode: RenderMode,
    density_normals: bool,
) -> Result<RenderOutput<f32>> {
    let pose32 = pose.cast::<f32>();
    let body = PosedBody::new(skeleton, &pose32, &state.shape)?;
    let ev = state.params.evaluator(&pose32, &state.shape)?;
    let scene = Scene {
        body: &body,
        lighting: &state.lighting,
        settings,
        mode,
        density_normals,
    };
    Ok(render(&scene, &ev, &camera.cast())?)
}

/// Output layout of [`run`].
#[derive(Clone, Debug)]
pub struct RunPaths {
    pub dir: PathBuf,
}

impl RunPaths {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self { dir: dir.into() }
    }

    pub fn checkpoint(&self, step: u64) -> PathBuf {
        self.dir.join(format!("step_{step:06}.dhck"))
    }

    pub fn final_checkpoint(&self) -> PathBuf {
        self.dir.join("final.dhck")
    }

    pub fn metrics(&self) -> PathBuf {
        self.dir.join("metrics.jsonl")
    }
}

/// Trains until `config.iterations`, writing metrics and periodic checkpoints.
/// A resumed trainer appends to the existing metrics file.
pub fn run(trainer: &mut Trainer, paths: &RunPaths, mut on_step: impl FnMut(&StepReport)) -> Result<Checkpoint> {
    fs::create_dir_all(&paths.dir)?;
    let file = fs::OpenOptions::new().create(true).append(true).open(paths.metrics())?;
    let mut metrics = MetricsWriter::new(BufWriter::new(file));
    let every = trainer.config.checkpoint_every;
    while trainer.state.step < trainer.config.iterations {
        let report = trainer.step()?;
        metrics.write(&report.metrics())?;
        on_step(&report);
        if every > 0 && trainer.state.step % every == 0 {
            trainer.checkpoint().save(&paths.checkpoint(trainer.state.step))?;
        }
    }
    let ckpt = trainer.checkpoint();
    ckpt.save(&paths.final_checkpoint())?;
    Ok(ckpt)
}
