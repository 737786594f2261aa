//! Per-ray forward rendering and its reverse pass into field, shape and lighting.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::camera::{Camera, Ray};
use super::composite::{composite_backward, composite_weights};
use super::image::Image;
use super::sampling::{propose_and_resample, Histogram};
use super::sh::ShLighting;
use super::{RenderError, RenderMode, RenderSettings};
use crate::body::{density_proxy, density_proxy_derivative, PosedBody, Region, SemanticCoord, SHAPE_DIM};
use crate::field::{composite_density, composite_density_grad, FieldEvaluator, FieldGradAccum, FieldOutput, FieldOutputGrad};
use crate::math::{Aabb, Vec3};
use crate::render::sh::SH_COEFFS;
use crate::scalar::Scalar;

const RAY_CHUNK: usize = 64;

/// Anything that maps semantic coordinates to radiance.
///
/// Normals are expressed in the frame of the coordinate's bone; the renderer
/// rotates them into world space.
pub trait RadianceSource<T: Scalar>: Sync {
    fn eval(&self, coord: &SemanticCoord<T>) -> FieldOutput<T>;

    fn density(&self, coord: &SemanticCoord<T>) -> T {
        self.eval(coord).density
    }

    fn proposal_density(&self, coord: &SemanticCoord<T>) -> T;
}

impl<T: Scalar> RadianceSource<T> for FieldEvaluator<'_, T> {
    fn eval(&self, coord: &SemanticCoord<T>) -> FieldOutput<T> {
        FieldEvaluator::eval(self, coord)
    }

    fn density(&self, coord: &SemanticCoord<T>) -> T {
        FieldEvaluator::density(self, coord)
    }

    fn proposal_density(&self, coord: &SemanticCoord<T>) -> T {
        FieldEvaluator::proposal_density(self, coord)
    }
}

/// Everything a ray needs besides the radiance source.
pub struct Scene<'a, T> {
    pub body: &'a PosedBody<T>,
    pub lighting: &'a ShLighting<T>,
    pub settings: &'a RenderSettings,
    pub mode: RenderMode,
    /// Estimate density normals for samples above the weight cutoff.
    pub density_normals: bool,
}

impl<T: Scalar> Scene<'_, T> {
    pub fn bounds(&self) -> Aabb<T> {
        self.body.region_bounds(Region::FullBody)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RaySamples<T> {
    pub coarse: Histogram<T>,
    pub coarse_coords: Vec<SemanticCoord<T>>,
    pub coarse_raw: Vec<T>,
    pub coarse_proxy: Vec<T>,
    pub coarse_density: Vec<T>,
    pub fine_edges: Vec<T>,
    pub t: Vec<T>,
    pub delta: Vec<T>,
    pub positions: Vec<Vec3<T>>,
    pub coords: Vec<SemanticCoord<T>>,
    pub tau_raw: Vec<T>,
    pub tau_proxy: Vec<T>,
    pub tau: Vec<T>,
    pub albedo: Vec<Vec3<T>>,
    /// Predicted normals rotated into world space.
    pub normal_pred: Vec<Vec3<T>>,
    pub density_normals: Vec<Option<Vec3<T>>>,
    pub colors: Vec<Vec3<T>>,
    pub weights: Vec<T>,
    pub fallback: bool,
}

impl<T: Scalar> RaySamples<T> {
    pub fn fine_histogram(&self) -> Histogram<T> {
        Histogram {
            edges: self.fine_edges.clone(),
            weights: self.weights.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RayRecord<T> {
    pub pixel: usize,
    pub ray: Ray<T>,
    pub color: Vec3<T>,
    pub mask: T,
    /// Weighted sum of density normals (zero when not estimated).
    pub normal: Vec3<T>,
    /// `None` when the ray misses the scene bounds.
    pub samples: Option<RaySamples<T>>,
}

fn final_density<T: Scalar, S: RadianceSource<T>>(body: &PosedBody<T>, source: &S, x: Vec3<T>) -> T {
    let c = body.evaluate(x);
    composite_density(source.density(&c), density_proxy(c.d, body.sharpness()))
}

/// `-grad tau / |grad tau|` by central differences, `None` where the gradient vanishes.
fn density_normal<T: Scalar, S: RadianceSource<T>>(body: &PosedBody<T>, source: &S, x: Vec3<T>, step: T) -> Option<Vec3<T>> {
    let mut g = Vec3::zero();
    for axis in 0..3 {
        let e = Vec3::unit(axis) * step;
        g[axis] = (final_density(body, source, x + e) - final_density(body, source, x - e)) / (step + step);
    }
    (-g).try_normalize(T::lit(1e-9))
}

/// Renders one ray. `rng` jitters the fine quantiles.
pub fn trace_ray<T: Scalar, S: RadianceSource<T>>(
    scene: &Scene<'_, T>,
    source: &S,
    ray: Ray<T>,
    pixel: usize,
    rng: Option<&mut ChaCha8Rng>,
) -> RayRecord<T> {
    let miss = RayRecord {
        pixel,
        ray,
        color: Vec3::zero(),
        mask: T::zero(),
        normal: Vec3::zero(),
        samples: None,
    };
    let Some((near, far)) = scene.bounds().intersect_ray(ray.origin, ray.direction) else {
        return miss;
    };
    let settings = scene.settings;
    let resolvable = far.abs().max(T::one())
        * T::epsilon()
        * T::from_usize_lossy(16 * (settings.n_coarse + settings.n_fine + 1));
    if !(far - near > resolvable.max(T::lit(1e-6))) {
        return miss;
    }
    let body = scene.body;
    let a = body.sharpness();
    let mut coarse_coords = Vec::with_capacity(settings.n_coarse);
    let mut coarse_raw = Vec::with_capacity(settings.n_coarse);
    let mut coarse_proxy = Vec::with_capacity(settings.n_coarse);
    let proposal = propose_and_resample(
        near,
        far,
        settings.n_coarse,
        settings.n_fine,
        |t| {
            let c = body.evaluate(ray.at(t));
            let raw = source.proposal_density(&c);
            let proxy = density_proxy(c.d, a);
            coarse_coords.push(c);
            coarse_raw.push(raw);
            coarse_proxy.push(proxy);
            composite_density(raw, proxy)
        },
        rng,
    );

    let n = settings.n_fine;
    let edges = proposal.fine_edges;
    let mut s = RaySamples {
        coarse: proposal.coarse,
        coarse_coords,
        coarse_raw,
        coarse_proxy,
        coarse_density: proposal.coarse_density,
        t: Vec::with_capacity(n),
        delta: Vec::with_capacity(n),
        positions: Vec::with_capacity(n),
        coords: Vec::with_capacity(n),
        tau_raw: Vec::with_capacity(n),
        tau_proxy: Vec::with_capacity(n),
        tau: Vec::with_capacity(n),
        albedo: Vec::with_capacity(n),
        normal_pred: Vec::with_capacity(n),
        density_normals: vec![None; n],
        colors: Vec::with_capacity(n),
        weights: Vec::new(),
        fine_edges: Vec::new(),
        fallback: proposal.fallback,
    };
    for k in 0..n {
        let t = (edges[k] + edges[k + 1]) * T::half();
        let x = ray.at(t);
        let c = body.evaluate(x);
        let out = source.eval(&c);
        let proxy = density_proxy(c.d, a);
        s.t.push(t);
        s.delta.push(edges[k + 1] - edges[k]);
        s.positions.push(x);
        s.tau_raw.push(out.density);
        s.tau_proxy.push(proxy);
        s.tau.push(composite_density(out.density, proxy));
        s.albedo.push(out.albedo);
        s.normal_pred.push(body.bone_rotation(c.bone).mul_vec(out.normal));
        s.coords.push(c);
    }
    s.fine_edges = edges;
    s.weights = composite_weights(&s.tau, &s.delta);

    if scene.density_normals {
        let cutoff = T::lit(settings.weight_cutoff);
        let step = T::lit(settings.normal_step);
        for k in 0..n {
            if s.weights[k] > cutoff {
                s.density_normals[k] = density_normal(body, source, s.positions[k], step);
            }
        }
    }

    let mut color = Vec3::zero();
    let mut mask = T::zero();
    let mut normal = Vec3::zero();
    for k in 0..n {
        let shading_normal = match (settings.shade_with_density_normals, s.density_normals[k]) {
            (true, Some(nd)) => nd,
            _ => s.normal_pred[k],
        };
        let c = match scene.mode {
            RenderMode::Shaded => scene.lighting.shade(s.albedo[k], shading_normal),
            RenderMode::Albedo => s.albedo[k],
            RenderMode::Normals | RenderMode::Mask => Vec3::zero(),
        };
        s.colors.push(c);
        let w = s.weights[k];
        color += c * w;
        mask += w;
        if let Some(nd) = s.density_normals[k] {
            normal += nd * w;
        }
    }
    RayRecord {
        pixel,
        ray,
        color,
        mask,
        normal,
        samples: Some(s),
    }
}

fn ray_rng(seed: u64, pixel: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(pixel as u64);
    rng
}

/// Renders a subset of pixels (row-major indices). With `jitter_seed` the fine
/// quantiles are jittered per ray, deterministically in `(seed, pixel)`.
pub fn render_pixels<T: Scalar, S: RadianceSource<T>>(
    scene: &Scene<'_, T>,
    source: &S,
    camera: &Camera<T>,
    pixels: &[usize],
    jitter_seed: Option<u64>,
) -> Vec<RayRecord<T>> {
    pixels
        .par_chunks(RAY_CHUNK)
        .map(|chunk| {
            chunk
                .iter()
                .map(|&p| {
                    let mut rng = jitter_seed.map(|s| ray_rng(s, p));
                    trace_ray(scene, source, camera.pixel_ray(p), p, rng.as_mut())
                })
                .collect::<Vec<_>>()
        })
        .collect::<Vec<_>>()
        .into_iter()
        .flatten()
        .collect()
}

#[derive(Clone, Debug)]
pub struct RenderOutput<T> {
    pub color: Image<T>,
    pub mask: Image<T>,
    /// Composited density normals (zero where not estimated).
    pub normal: Image<T>,
    pub rays: Vec<RayRecord<T>>,
    /// Rays whose proposal histogram was empty.
    pub fallback_rays: usize,
}

impl<T: Scalar> RenderOutput<T> {
    /// The image for a mode: color, the mask as gray, or normals encoded as `(n + 1) / 2`.
    pub fn image(&self, mode: RenderMode) -> Image<T> {
        match mode {
            RenderMode::Shaded | RenderMode::Albedo => self.color.clone(),
            RenderMode::Mask => self.mask.clone(),
            RenderMode::Normals => {
                let mut img = self.normal.clone();
                for v in &mut img.data {
                    *v = ((*v + T::one()) * T::half()).max(T::zero()).min(T::one());
                }
                img
            }
        }
    }
}

/// Renders a full image without jitter.
pub fn render<T: Scalar, S: RadianceSource<T>>(
    scene: &Scene<'_, T>,
    source: &S,
    camera: &Camera<T>,
) -> Result<RenderOutput<T>, RenderError> {
    camera.validate()?;
    scene.settings.validate()?;
    let pixels: Vec<usize> = (0..camera.pixel_count()).collect();
    let rays = render_pixels(scene, source, camera, &pixels, None);
    let (w, h) = (camera.width, camera.height);
    let mut color = Image::new(w, h, 3);
    let mut mask = Image::new(w, h, 1);
    let mut normal = Image::new(w, h, 3);
    let mut fallback_rays = 0;
    for r in &rays {
        color.set_rgb(r.pixel, r.color);
        mask.data[r.pixel] = r.mask;
        normal.set_rgb(r.pixel, r.normal);
        if r.samples.as_ref().is_some_and(|s| s.fallback) {
            fallback_rays += 1;
        }
    }
    Ok(RenderOutput {
        color,
        mask,
        normal,
        rays,
        fallback_rays,
    })
}

/// Upstream gradients for one ray.
#[derive(Clone, Debug, PartialEq)]
pub struct RayUpstream<T> {
    pub color: Vec3<T>,
    pub mask: T,
    /// Direct gradients on the fine weights.
    pub weights: Vec<T>,
    /// Gradients on the world-space predicted normals.
    pub normal_pred: Vec<Vec3<T>>,
    pub tau_raw: Vec<T>,
    pub tau_proxy: Vec<T>,
    pub coarse_weights: Vec<T>,
}

impl<T: Scalar> RayUpstream<T> {
    pub fn zeros(n_fine: usize, n_coarse: usize) -> Self {
        Self {
            color: Vec3::zero(),
            mask: T::zero(),
            weights: vec![T::zero(); n_fine],
            normal_pred: vec![Vec3::zero(); n_fine],
            tau_raw: vec![T::zero(); n_fine],
            tau_proxy: vec![T::zero(); n_fine],
            coarse_weights: vec![T::zero(); n_coarse],
        }
    }
}

/// Gradient accumulators filled by [`backward_ray`].
#[derive(Clone, Debug, PartialEq)]
pub struct GradSink<T> {
    pub field: FieldGradAccum<T>,
    /// Gradient on the shape scales through the body geometry.
    pub shape: [T; SHAPE_DIM],
    pub lighting: [T; SH_COEFFS],
}

impl<T: Scalar> GradSink<T> {
    pub fn new(ev: &FieldEvaluator<'_, T>) -> Self {
        Self {
            field: ev.accumulator(),
            shape: [T::zero(); SHAPE_DIM],
            lighting: [T::zero(); SH_COEFFS],
        }
    }

    pub fn merge(&mut self, other: &Self) {
        self.field.merge(&other.field);
        for (a, b) in self.shape.iter_mut().zip(&other.shape) {
            *a += *b;
        }
        for (a, b) in self.lighting.iter_mut().zip(&other.lighting) {
            *a += *b;
        }
    }
}

/// Reverse pass of [`trace_ray`] for a ray rendered with `ev` as the source.
///
/// Sample placement, density normals and the coarse proxy are treated as constants.
pub fn backward_ray<T: Scalar>(
    scene: &Scene<'_, T>,
    ev: &FieldEvaluator<'_, T>,
    record: &RayRecord<T>,
    up: &RayUpstream<T>,
    sink: &mut GradSink<T>,
) -> Result<(), RenderError> {
    let Some(s) = &record.samples else {
        return Ok(());
    };
    let n = s.tau.len();
    if up.weights.len() != n || up.normal_pred.len() != n || up.tau_raw.len() != n || up.tau_proxy.len() != n {
        return Err(RenderError::ShapeMismatch(format!("ray has {n} fine samples")));
    }
    if up.coarse_weights.len() != s.coarse_density.len() {
        return Err(RenderError::ShapeMismatch(format!(
            "ray has {} coarse bins",
            s.coarse_density.len()
        )));
    }
    let body = scene.body;
    let a = body.sharpness();
    let cg = composite_backward(&s.colors, &s.tau, &s.delta, up.color, up.mask, Some(&up.weights))?;
    for k in 0..n {
        let mut d_albedo = Vec3::zero();
        let mut d_normal = up.normal_pred[k];
        match scene.mode {
            RenderMode::Shaded => {
                let density_shading = scene.settings.shade_with_density_normals && s.density_normals[k].is_some();
                let shading_normal = if density_shading {
                    s.density_normals[k].unwrap_or(s.normal_pred[k])
                } else {
                    s.normal_pred[k]
                };
                let g = scene.lighting.shade_backward(s.albedo[k], shading_normal, cg.colors[k]);
                d_albedo = g.albedo;
                if !density_shading {
                    d_normal += g.normal;
                }
                for (acc, v) in sink.lighting.iter_mut().zip(g.lighting) {
                    *acc += v;
                }
            }
            RenderMode::Albedo => d_albedo = cg.colors[k],
            RenderMode::Normals | RenderMode::Mask => {}
        }
        let (g_raw, g_proxy) = composite_density_grad(s.tau_raw[k], s.tau_proxy[k]);
        let d_raw = cg.tau[k] * g_raw + up.tau_raw[k];
        let d_proxy = cg.tau[k] * g_proxy + up.tau_proxy[k];
        let coord = &s.coords[k];
        let mut grad_d = d_proxy * density_proxy_derivative(coord.d, a);
        let mut grad_s = Vec3::zero();
        let field_grad = FieldOutputGrad {
            albedo: d_albedo,
            density: d_raw,
            normal: body.bone_rotation(coord.bone).transpose_mul_vec(d_normal),
            proposal: T::zero(),
        };
        if field_grad != FieldOutputGrad::default() {
            let tape = ev.forward(coord);
            let din = ev.backward(&tape, &field_grad, &mut sink.field);
            grad_d += din[0];
            grad_s = Vec3::new(din[1], din[2], din[3]);
        }
        if grad_d != T::zero() || grad_s != Vec3::zero() {
            let vjp = body.shape_vjp(s.positions[k], grad_d, grad_s);
            for (acc, v) in sink.shape.iter_mut().zip(vjp) {
                *acc += v;
            }
        }
    }

    if up.coarse_weights.iter().any(|&g| g != T::zero()) {
        let m = s.coarse_density.len();
        let delta: Vec<T> = s.coarse.edges.windows(2).map(|w| w[1] - w[0]).collect();
        let zeros = vec![Vec3::zero(); m];
        let cg = composite_backward(&zeros, &s.coarse_density, &delta, Vec3::zero(), T::zero(), Some(&up.coarse_weights))?;
        for j in 0..m {
            let (g_raw, _) = composite_density_grad(s.coarse_raw[j], s.coarse_proxy[j]);
            let g = cg.tau[j] * g_raw;
            if g != T::zero() {
                let tape = ev.proposal_forward(&s.coarse_coords[j]);
                ev.proposal_backward(&tape, g, &mut sink.field);
            }
        }
    }
    Ok(())
}

/// Reverse pass over many rays, merged in a fixed order.
pub fn backward_rays<T: Scalar>(
    scene: &Scene<'_, T>,
    ev: &FieldEvaluator<'_, T>,
    records: &[RayRecord<T>],
    upstream: &[RayUpstream<T>],
) -> Result<GradSink<T>, RenderError> {
    if records.len() != upstream.len() {
        return Err(RenderError::ShapeMismatch(format!(
            "{} rays but {} upstream gradients",
            records.len(),
            upstream.len()
        )));
    }
    let partials: Vec<Result<GradSink<T>, RenderError>> = records
        .par_chunks(RAY_CHUNK)
        .zip(upstream.par_chunks(RAY_CHUNK))
        .map(|(rs, us)| {
            let mut sink = GradSink::new(ev);
            for (r, u) in rs.iter().zip(us) {
                backward_ray(scene, ev, r, u, &mut sink)?;
            }
            Ok(sink)
        })
        .collect();
    let mut total = GradSink::new(ev);
    for p in partials {
        total.merge(&p?);
    }
    Ok(total)
}
