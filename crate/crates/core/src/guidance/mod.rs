//! Score distillation: diffusion schedule, noising, SDS gradients and denoisers.

mod wire;

pub use wire::*;

use std::f64::consts::{FRAC_PI_2, FRAC_PI_4, PI};
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::body::Region;
use crate::render::Image;
use crate::scalar::Scalar;

#[derive(Debug, Error)]
pub enum GuidanceError {
    #[error("timestep {t} outside [0, {max}]")]
    InvalidTimestep { t: usize, max: usize },
    #[error("image shape mismatch: expected {expected:?}, got {got:?}")]
    ShapeMismatch { expected: [usize; 3], got: [usize; 3] },
    #[error("invalid schedule: {0}")]
    InvalidSchedule(String),
    #[error("transport error talking to {endpoint}: {source}")]
    Transport {
        endpoint: String,
        #[source]
        source: std::io::Error,
    },
    #[error("no response from {endpoint} within {seconds} s")]
    Timeout { endpoint: String, seconds: f64 },
    #[error("malformed frame: {0}")]
    Malformed(String),
    #[error("protocol version mismatch: expected {expected}, got {got}")]
    Version { expected: u16, got: u16 },
    #[error("denoiser reported an error: {0}")]
    Remote(String),
    #[error("payload of {0} bytes exceeds the limit")]
    PayloadTooLarge(usize),
    #[error("non-finite values in {0}")]
    NonFinite(&'static str),
    #[error("denoiser failed at t={t} for prompt `{prompt}`: {source}")]
    Request {
        t: usize,
        prompt: String,
        #[source]
        source: Box<GuidanceError>,
    },
}

pub type Result<T, E = GuidanceError> = std::result::Result<T, E>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    Cosine,
    Linear,
}

/// SDS weighting `w_s(t)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Weighting {
    OneMinusAlphaBar,
    Constant(f64),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub kind: ScheduleKind,
    pub weighting: Weighting,
    pub t_min: f64,
    pub t_max: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            kind: ScheduleKind::Cosine,
            weighting: Weighting::OneMinusAlphaBar,
            t_min: 0.02,
            t_max: 0.98,
        }
    }
}

/// Variance-preserving schedule over timesteps `0..=steps`.
#[derive(Clone, Debug, PartialEq)]
pub struct DiffusionSchedule {
    config: ScheduleConfig,
    alpha_bar: Vec<f64>,
}

const MAX_BETA: f64 = 0.999;
const COSINE_OFFSET: f64 = 0.008;

impl DiffusionSchedule {
    pub fn new(config: ScheduleConfig) -> Result<Self> {
        let n = config.steps;
        if n < 2 {
            return Err(GuidanceError::InvalidSchedule(format!("need at least 2 steps, got {n}")));
        }
        if !(0.0 <= config.t_min && config.t_min <= config.t_max && config.t_max <= 1.0) {
            return Err(GuidanceError::InvalidSchedule(format!(
                "t range [{}, {}] not inside [0, 1]",
                config.t_min, config.t_max
            )));
        }
        if let Weighting::Constant(c) = config.weighting {
            if !(c >= 0.0 && c.is_finite()) {
                return Err(GuidanceError::InvalidSchedule(format!("weight {c} must be >= 0")));
            }
        }
        let levels = n + 1;
        let betas: Vec<f64> = match config.kind {
            ScheduleKind::Cosine => {
                let f = |k: usize| {
                    let x = (k as f64 / levels as f64 + COSINE_OFFSET) / (1.0 + COSINE_OFFSET);
                    (x * FRAC_PI_2).cos().powi(2)
                };
                (1..=levels).map(|k| (1.0 - f(k) / f(k - 1)).clamp(1e-8, MAX_BETA)).collect()
            }
            ScheduleKind::Linear => {
                let (lo, hi) = (1e-4, 2e-2 * 1000.0 / n as f64);
                (0..levels)
                    .map(|k| (lo + (hi - lo) * k as f64 / n as f64).min(MAX_BETA))
                    .collect()
            }
        };
        let mut acc = 1.0;
        let alpha_bar = betas
            .iter()
            .map(|b| {
                acc *= 1.0 - b;
                acc
            })
            .collect();
        Ok(Self { config, alpha_bar })
    }

    pub fn config(&self) -> &ScheduleConfig {
        &self.config
    }

    /// Largest valid timestep.
    pub fn max_t(&self) -> usize {
        self.config.steps
    }

    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        self.alpha_bar
            .get(t)
            .copied()
            .ok_or(GuidanceError::InvalidTimestep { t, max: self.max_t() })
    }

    /// `(sqrt(alpha_bar), sqrt(1 - alpha_bar))`.
    pub fn levels(&self, t: usize) -> Result<(f64, f64)> {
        let a = self.alpha_bar(t)?;
        Ok((a.sqrt(), (1.0 - a).sqrt()))
    }

    pub fn weight(&self, t: usize) -> Result<f64> {
        let a = self.alpha_bar(t)?;
        Ok(match self.config.weighting {
            Weighting::OneMinusAlphaBar => 1.0 - a,
            Weighting::Constant(c) => c,
        })
    }

    /// Timestep drawn uniformly from the configured fraction range.
    pub fn sample_t<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        let n = self.config.steps as f64;
        let lo = (self.config.t_min * n).ceil() as usize;
        let hi = ((self.config.t_max * n).floor() as usize).max(lo);
        rng.gen_range(lo..=hi)
    }
}

impl Default for DiffusionSchedule {
    fn default() -> Self {
        Self::new(ScheduleConfig::default()).expect("default schedule")
    }
}

/// Camera-relative view qualifier for the prompt.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ViewQualifier {
    Front,
    Side,
    Back,
    Overhead,
}

impl ViewQualifier {
    pub fn from_angles(azimuth: f64, elevation: f64) -> Self {
        if elevation > FRAC_PI_4 {
            return ViewQualifier::Overhead;
        }
        let az = (azimuth + PI).rem_euclid(2.0 * PI) - PI;
        if az.abs() < FRAC_PI_4 {
            ViewQualifier::Front
        } else if (az.abs() - PI).abs() < FRAC_PI_4 {
            ViewQualifier::Back
        } else {
            ViewQualifier::Side
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ViewQualifier::Front => "front",
            ViewQualifier::Side => "side",
            ViewQualifier::Back => "back",
            ViewQualifier::Overhead => "overhead",
        }
    }
}

impl fmt::Display for ViewQualifier {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GuidancePrompt {
    pub base: String,
    pub region: Region,
    pub view: ViewQualifier,
}

impl GuidancePrompt {
    pub fn new(base: impl Into<String>, region: Region, view: ViewQualifier) -> Self {
        Self {
            base: base.into(),
            region,
            view,
        }
    }

    pub fn composed(&self) -> String {
        format!("{}, {}, {} view", self.base, self.region.prompt_fragment(), self.view)
    }
}

impl fmt::Display for GuidancePrompt {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.composed())
    }
}

fn shape_of<T>(img: &Image<T>) -> [usize; 3] {
    [img.height, img.width, img.channels]
}

fn check_shape<T, U>(a: &Image<T>, b: &Image<U>) -> Result<()> {
    if shape_of(a) == shape_of(b) {
        Ok(())
    } else {
        Err(GuidanceError::ShapeMismatch {
            expected: shape_of(a),
            got: shape_of(b),
        })
    }
}

/// `z_t = sqrt(alpha_bar) u + sqrt(1 - alpha_bar) eps`.
pub fn noise_image<T: Scalar>(u: &Image<T>, t: usize, eps: &Image<T>, schedule: &DiffusionSchedule) -> Result<Image<T>> {
    check_shape(u, eps)?;
    let (s, n) = schedule.levels(t)?;
    let (s, n) = (T::lit(s), T::lit(n));
    let data = u.data.iter().zip(&eps.data).map(|(&a, &e)| s * a + n * e).collect();
    Ok(Image {
        data,
        ..Image::new(u.width, u.height, u.channels)
    })
}

/// Standard normal image.
pub fn gaussian_image<T: Scalar, R: Rng + ?Sized>(rng: &mut R, width: usize, height: usize, channels: usize) -> Image<T> {
    let mut img = Image::new(width, height, channels);
    for v in img.data.iter_mut() {
        let x: f64 = StandardNormal.sample(rng);
        *v = T::lit(x);
    }
    img
}

/// Noise-prediction model queried by score distillation.
pub trait Denoiser<T> {
    fn predict(&mut self, z: &Image<T>, t: usize, prompt: &str, scale: f64) -> Result<Image<T>>;
}

impl<T, D: Denoiser<T> + ?Sized> Denoiser<T> for Box<D> {
    fn predict(&mut self, z: &Image<T>, t: usize, prompt: &str, scale: f64) -> Result<Image<T>> {
        (**self).predict(z, t, prompt, scale)
    }
}

/// Exact posterior-mean noise predictor for data drawn from `N(mu, sigma^2 I)`.
#[derive(Clone, Debug)]
pub struct AnalyticGaussianDenoiser<T> {
    pub mean: Image<T>,
    pub sigma: f64,
    schedule: DiffusionSchedule,
}

impl<T: Scalar> AnalyticGaussianDenoiser<T> {
    pub fn new(mean: Image<T>, sigma: f64, schedule: DiffusionSchedule) -> Result<Self> {
        if !(sigma >= 0.0 && sigma.is_finite()) {
            return Err(GuidanceError::InvalidSchedule(format!("sigma {sigma} must be >= 0")));
        }
        Ok(Self { mean, sigma, schedule })
    }

    pub fn schedule(&self) -> &DiffusionSchedule {
        &self.schedule
    }
}

impl<T: Scalar> Denoiser<T> for AnalyticGaussianDenoiser<T> {
    fn predict(&mut self, z: &Image<T>, t: usize, _prompt: &str, _scale: f64) -> Result<Image<T>> {
        check_shape(&self.mean, z)?;
        let a = self.schedule.alpha_bar(t)?;
        let var = a * self.sigma * self.sigma + 1.0 - a;
        let gain = T::lit((1.0 - a).sqrt() / var);
        let s = T::lit(a.sqrt());
        let data = z.data.iter().zip(&self.mean.data).map(|(&x, &m)| (x - s * m) * gain).collect();
        Ok(Image {
            data,
            ..Image::new(z.width, z.height, z.channels)
        })
    }
}

/// Returns a fixed prediction regardless of input.
#[derive(Clone, Debug)]
pub struct ConstantDenoiser<T>(pub Image<T>);

impl<T: Scalar> Denoiser<T> for ConstantDenoiser<T> {
    fn predict(&mut self, z: &Image<T>, _t: usize, _prompt: &str, _scale: f64) -> Result<Image<T>> {
        check_shape(z, &self.0)?;
        Ok(self.0.clone())
    }
}

/// One `(t, eps)` draw of score distillation.
#[derive(Clone, Debug, PartialEq)]
pub struct SdsDraw<T> {
    pub t: usize,
    pub eps: Image<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SdsOutput<T> {
    /// Image-space gradient `w_s(t) (eps_hat - eps)` averaged over draws.
    pub grad: Image<T>,
    pub timesteps: Vec<usize>,
}

pub struct SdsRequest<'a> {
    pub prompt: &'a str,
    pub scale: f64,
}

/// Score-distillation image gradient for explicit draws.
pub fn sds_gradient_with_draws<T: Scalar, D: Denoiser<T> + ?Sized>(
    u: &Image<T>,
    denoiser: &mut D,
    request: &SdsRequest<'_>,
    draws: &[SdsDraw<T>],
    schedule: &DiffusionSchedule,
) -> Result<SdsOutput<T>> {
    if draws.is_empty() {
        return Err(GuidanceError::InvalidSchedule("at least one draw required".into()));
    }
    let mut grad = Image::new(u.width, u.height, u.channels);
    let inv = T::one() / T::from_usize_lossy(draws.len());
    for draw in draws {
        let z = noise_image(u, draw.t, &draw.eps, schedule)?;
        let w = T::lit(schedule.weight(draw.t)?);
        let eps_hat = denoiser
            .predict(&z, draw.t, request.prompt, request.scale)
            .map_err(|e| GuidanceError::Request {
                t: draw.t,
                prompt: request.prompt.to_string(),
                source: Box::new(e),
            })?;
        check_shape(u, &eps_hat)?;
        if eps_hat.data.iter().any(|v| !v.is_finite()) {
            return Err(GuidanceError::NonFinite("denoiser output"));
        }
        for ((g, &p), &e) in grad.data.iter_mut().zip(&eps_hat.data).zip(&draw.eps.data) {
            *g += w * (p - e) * inv;
        }
    }
    Ok(SdsOutput {
        grad,
        timesteps: draws.iter().map(|d| d.t).collect(),
    })
}

/// Score-distillation image gradient averaged over `n_samples` random draws.
pub fn sds_gradient<T: Scalar, D: Denoiser<T> + ?Sized, R: Rng + ?Sized>(
    u: &Image<T>,
    denoiser: &mut D,
    request: &SdsRequest<'_>,
    rng: &mut R,
    schedule: &DiffusionSchedule,
    n_samples: usize,
) -> Result<SdsOutput<T>> {
    let draws: Vec<SdsDraw<T>> = (0..n_samples.max(1))
        .map(|_| {
            let t = schedule.sample_t(rng);
            SdsDraw {
                t,
                eps: gaussian_image(rng, u.width, u.height, u.channels),
            }
        })
        .collect();
    sds_gradient_with_draws(u, denoiser, request, &draws, schedule)
}

/// Mean-squared-error image gradient `u - target`.
pub fn photometric_gradient<T: Scalar>(u: &Image<T>, target: &Image<T>) -> Result<Image<T>> {
    check_shape(target, u)?;
    let data = u.data.iter().zip(&target.data).map(|(&a, &b)| a - b).collect();
    Ok(Image {
        data,
        ..Image::new(u.width, u.height, u.channels)
    })
}

/// Peak signal-to-noise ratio for images in `[0, 1]`.
pub fn psnr<T: Scalar>(a: &Image<T>, b: &Image<T>) -> Result<f64> {
    check_shape(a, b)?;
    let mse = a
        .data
        .iter()
        .zip(&b.data)
        .map(|(&x, &y)| (x.to_f64_lossy() - y.to_f64_lossy()).powi(2))
        .sum::<f64>()
        / a.data.len().max(1) as f64;
    Ok(if mse == 0.0 { f64::INFINITY } else { -10.0 * mse.log10() })
}

/// Where guidance comes from.
#[derive(Clone, Debug, PartialEq)]
pub enum GuidanceSpec {
    /// Directory holding target views for photometric reconstruction.
    Photometric(std::path::PathBuf),
    /// Mean image of an analytic Gaussian denoiser.
    Gaussian(std::path::PathBuf),
    Remote(String),
}

impl FromStr for GuidanceSpec {
    type Err = GuidanceError;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || GuidanceError::Malformed(format!("guidance spec `{s}`; expected builtin:photometric:<path>, builtin:gaussian:<path> or remote:<host:port>"));
        if let Some(rest) = s.strip_prefix("builtin:photometric:") {
            if rest.is_empty() {
                return Err(bad());
            }
            Ok(GuidanceSpec::Photometric(rest.into()))
        } else if let Some(rest) = s.strip_prefix("builtin:gaussian:") {
            if rest.is_empty() {
                return Err(bad());
            }
            Ok(GuidanceSpec::Gaussian(rest.into()))
        } else if let Some(rest) = s.strip_prefix("remote:") {
            if !rest.contains(':') {
                return Err(bad());
            }
            Ok(GuidanceSpec::Remote(rest.to_string()))
        } else {
            Err(bad())
        }
    }
}
