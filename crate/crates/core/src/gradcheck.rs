//! Finite-difference verification of every analytic backward pass.
//!
//! Each component compares analytic gradients against central differences on
//! a seeded random fixture. Probes whose one-sided differences disagree are
//! treated as sitting on a kink (ReLU boundary, max, absolute value) and are
//! excluded from the comparison.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::body::{density_proxy, Pose, PosedBody, Region, SemanticCoord, Shape, SkeletonConfig, SHAPE_DIM};
use crate::field::{composite_density, field_eval_batch_with_param_grads, FieldArch, FieldInput, FieldOutputGrad, FieldParams};
use crate::losses::{
    density_loss, density_loss_grad, mask_loss, mask_loss_grad, normal_loss_ray, orientation_loss_ray, proposal_loss_ray,
};
use crate::math::Vec3;
use crate::render::{
    backward_ray, composite, composite_backward, render_pixels, Camera, GradSink, Histogram, RayRecord, RayUpstream,
    RenderMode, RenderSettings, Scene, ShLighting, SH_COEFFS,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradCheckConfig {
    pub arch: FieldArch,
    pub seed: u64,
    /// Probes spread over the field parameters.
    pub probes: usize,
    /// Relative error a probe must stay under.
    pub tolerance: f64,
    /// Fraction of compared probes per component that must pass.
    pub pass_fraction: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            arch: tiny_arch(),
            seed: 0,
            probes: 200,
            tolerance: 1e-3,
            pass_fraction: 0.95,
        }
    }
}

/// Width-16 network used when no architecture is given.
pub fn tiny_arch() -> FieldArch {
    FieldArch {
        width: 16,
        layers: 2,
        bands: 3,
        cond_dim: 6,
        proposal_width: 8,
        proposal_layers: 2,
        joints: 16,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComponentReport {
    pub name: String,
    pub probes: usize,
    /// Probes left after kink exclusion.
    pub compared: usize,
    pub passed: usize,
    pub max_rel: f64,
    pub ok: bool,
}

impl ComponentReport {
    pub fn excluded(&self) -> usize {
        self.probes - self.compared
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradReport {
    pub tolerance: f64,
    pub pass_fraction: f64,
    pub components: Vec<ComponentReport>,
}

impl GradReport {
    pub fn passed(&self) -> bool {
        !self.components.is_empty() && self.components.iter().all(|c| c.ok)
    }

    pub fn component(&self, name: &str) -> Option<&ComponentReport> {
        self.components.iter().find(|c| c.name == name)
    }

    /// `(passed, compared)` over the components whose name starts with `prefix`.
    pub fn totals(&self, prefix: &str) -> (usize, usize) {
        self.components
            .iter()
            .filter(|c| c.name.starts_with(prefix))
            .fold((0, 0), |(p, n), c| (p + c.passed, n + c.compared))
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for c in &self.components {
            out.push_str(&format!(
                "{:<28} {:>4}/{:<4} excluded {:>3}  max rel {:.3e}  {}\n",
                c.name,
                c.passed,
                c.compared,
                c.excluded(),
                c.max_rel,
                if c.ok { "ok" } else { "FAIL" }
            ));
        }
        out.push_str(if self.passed() { "all components within tolerance\n" } else { "gradient check failed\n" });
        out
    }
}

/// Below this absolute difference a probe passes regardless of relative error.
const ABS_FLOOR: f64 = 1e-8;
/// One-sided differences further apart than this fraction mark a kink.
const KINK_RATIO: f64 = 0.05;

struct Probe {
    fd: f64,
    kink: bool,
}

fn probe(f: &dyn Fn(&[f64]) -> f64, x: &mut [f64], i: usize, h: f64) -> Probe {
    let orig = x[i];
    let f0 = f(x);
    x[i] = orig + h;
    let up = f(x);
    x[i] = orig - h;
    let dn = f(x);
    x[i] = orig;
    let fwd = (up - f0) / h;
    let bwd = (f0 - dn) / h;
    let scale = fwd.abs().max(bwd.abs());
    Probe {
        fd: (up - dn) / (2.0 * h),
        kink: (fwd - bwd).abs() > KINK_RATIO * scale + 1e-6,
    }
}

/// Relative error, or `None` when both values are negligible.
fn rel_err(fd: f64, an: f64) -> Option<f64> {
    let scale = fd.abs().max(an.abs());
    if scale < ABS_FLOOR * 100.0 {
        None
    } else {
        Some((fd - an).abs() / scale)
    }
}

struct Tally {
    probes: usize,
    compared: usize,
    passed: usize,
    max_rel: f64,
}

impl Tally {
    fn new() -> Self {
        Self { probes: 0, compared: 0, passed: 0, max_rel: 0.0 }
    }

    fn add(&mut self, p: &Probe, an: f64, tol: f64) {
        self.probes += 1;
        if p.kink {
            return;
        }
        self.compared += 1;
        let r = rel_err(p.fd, an);
        if (p.fd - an).abs() < ABS_FLOOR || r.is_some_and(|r| r < tol) {
            self.passed += 1;
        }
        match r {
            Some(r) if r.is_nan() => self.max_rel = f64::INFINITY,
            Some(r) => self.max_rel = self.max_rel.max(r),
            None if !(p.fd - an).is_finite() => self.max_rel = f64::INFINITY,
            None => {}
        }
    }

    fn finish(self, name: &str, cfg: &GradCheckConfig) -> ComponentReport {
        let ok = self.compared > 0
            && 2 * self.compared >= self.probes
            && self.passed as f64 >= cfg.pass_fraction * self.compared as f64;
        ComponentReport {
            name: name.to_string(),
            probes: self.probes,
            compared: self.compared,
            passed: self.passed,
            max_rel: self.max_rel,
            ok,
        }
    }
}

/// Runs the whole suite.
pub fn run(cfg: &GradCheckConfig) -> GradReport {
    run_with(cfg, &mut |_, _| {})
}

/// Like [`run`], but `tamper(component, analytic)` may rewrite each analytic
/// gradient before it is compared.
pub fn run_with(cfg: &GradCheckConfig, tamper: &mut dyn FnMut(&str, &mut [f64])) -> GradReport {
    let mut components = Vec::new();
    components.extend(field_components(cfg, tamper));
    components.extend(composite_components(cfg, tamper));
    components.extend(loss_components(cfg, tamper));
    components.extend(render_components(cfg, tamper));
    GradReport {
        tolerance: cfg.tolerance,
        pass_fraction: cfg.pass_fraction,
        components,
    }
}

/// Probes every coordinate of `x`.
fn check_all(
    name: &str,
    cfg: &GradCheckConfig,
    tamper: &mut dyn FnMut(&str, &mut [f64]),
    mut x: Vec<f64>,
    mut analytic: Vec<f64>,
    h: f64,
    f: &dyn Fn(&[f64]) -> f64,
) -> ComponentReport {
    tamper(name, &mut analytic);
    let mut t = Tally::new();
    for i in 0..x.len() {
        let p = probe(f, &mut x, i, h);
        t.add(&p, analytic[i], cfg.tolerance);
    }
    t.finish(name, cfg)
}

fn uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    rng.gen_range(lo..hi)
}

fn random_vec(rng: &mut ChaCha8Rng) -> Vec3<f64> {
    Vec3::new(uniform(rng, -1.0, 1.0), uniform(rng, -1.0, 1.0), uniform(rng, -1.0, 1.0))
}

fn random_pose(rng: &mut ChaCha8Rng, joints: usize, spread: f64) -> Pose<f64> {
    let mut p = Pose::rest(joints);
    for w in p.joint_rotations.iter_mut() {
        *w = random_vec(rng) * spread;
    }
    p
}

fn random_shape(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> Shape<f64> {
    let mut s = Shape::mean();
    for b in s.beta.iter_mut() {
        *b = uniform(rng, lo, hi);
    }
    s
}

// ---- field ----

struct FieldBatch {
    coords: Vec<SemanticCoord<f64>>,
    poses: Vec<Pose<f64>>,
    shapes: Vec<Shape<f64>>,
    grads: Vec<FieldOutputGrad<f64>>,
}

impl FieldBatch {
    fn new(rng: &mut ChaCha8Rng, n: usize, joints: usize) -> Self {
        let mut b = Self { coords: vec![], poses: vec![], shapes: vec![], grads: vec![] };
        for _ in 0..n {
            b.coords.push(SemanticCoord {
                d: uniform(rng, -0.2, 0.3),
                s: Vec3::new(uniform(rng, -0.9, 0.9), uniform(rng, 0.0, 1.8), uniform(rng, -0.2, 0.2)),
                bone: rng.gen_range(0..joints),
            });
            b.poses.push(random_pose(rng, joints, 0.6));
            b.shapes.push(random_shape(rng, 0.7, 1.4));
            b.grads.push(FieldOutputGrad {
                albedo: random_vec(rng),
                density: uniform(rng, -1.0, 1.0),
                normal: random_vec(rng),
                proposal: uniform(rng, -1.0, 1.0),
            });
        }
        b
    }

    fn inputs(&self) -> Vec<FieldInput<'_, f64>> {
        (0..self.coords.len())
            .map(|i| FieldInput { coord: self.coords[i], pose: &self.poses[i], shape: &self.shapes[i] })
            .collect()
    }

    fn objective(&self, params: &FieldParams<f64>, coords: &[SemanticCoord<f64>], shapes: &[Shape<f64>]) -> f64 {
        let mut total = 0.0;
        for i in 0..coords.len() {
            let Ok(ev) = params.evaluator(&self.poses[i], &shapes[i]) else { return f64::NAN };
            let out = ev.eval(&coords[i]);
            let g = &self.grads[i];
            total += out.albedo.dot(g.albedo) + out.density * g.density + out.normal.dot(g.normal);
            total += ev.proposal_density(&coords[i]) * g.proposal;
        }
        total
    }
}

fn field_components(cfg: &GradCheckConfig, tamper: &mut dyn FnMut(&str, &mut [f64])) -> Vec<ComponentReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let Ok(params) = FieldParams::<f64>::init(cfg.seed, &cfg.arch) else {
        return vec![Tally::new().finish("field.arch", cfg)];
    };
    let mut batch = FieldBatch::new(&mut rng, 6, cfg.arch.joints);
    let Ok(grads) = field_eval_batch_with_param_grads(&params, &batch.inputs(), &batch.grads) else {
        return vec![Tally::new().finish("field.batch", cfg)];
    };
    let mut out = Vec::new();

    // parameters, reported per group
    let groups = params.layout().groups();
    let mut analytic = grads.params.clone();
    tamper("field.params", &mut analytic);
    let mut picks: Vec<usize> = Vec::new();
    for (_, d) in &groups {
        for _ in 0..4.min(d.len()) {
            picks.push(rng.gen_range(d.range()));
        }
    }
    while picks.len() < cfg.probes {
        picks.push(rng.gen_range(0..params.len()));
    }
    let mut tallies: Vec<Tally> = groups.iter().map(|_| Tally::new()).collect();
    let arch = params.arch().clone();
    let f = |v: &[f64]| match FieldParams::from_values(&arch, v.to_vec()) {
        Ok(p) => batch.objective(&p, &batch.coords, &batch.shapes),
        Err(_) => f64::NAN,
    };
    let mut x = params.values.clone();
    for &i in &picks {
        let p = probe(&f, &mut x, i, 1e-5);
        let g = groups.iter().position(|(_, d)| d.range().contains(&i)).expect("index inside layout");
        tallies[g].add(&p, analytic[i], cfg.tolerance);
    }
    for ((name, _), t) in groups.iter().zip(tallies) {
        out.push(t.finish(&format!("field.{name}"), cfg));
    }

    // conditioning path onto the shape scales, as one offset shared by the batch
    let f = |v: &[f64]| {
        let shapes: Vec<Shape<f64>> = batch
            .shapes
            .iter()
            .map(|s| {
                let mut s = *s;
                for (b, d) in s.beta.iter_mut().zip(v) {
                    *b += d;
                }
                s
            })
            .collect();
        batch.objective(&params, &batch.coords, &shapes)
    };
    out.push(check_all("field.shape", cfg, tamper, vec![0.0; SHAPE_DIM], grads.shape.to_vec(), 1e-5, &f));

    // semantic inputs (the proposal head is a stop-gradient on them)
    for g in batch.grads.iter_mut() {
        g.proposal = 0.0;
    }
    let grads = field_eval_batch_with_param_grads(&params, &batch.inputs(), &batch.grads).expect("batch evaluated above");
    let x: Vec<f64> = batch.coords.iter().flat_map(|c| [c.d, c.s.x, c.s.y, c.s.z]).collect();
    let analytic: Vec<f64> = grads.inputs.iter().flat_map(|g| g.iter().copied()).collect();
    let f = |v: &[f64]| {
        let coords: Vec<SemanticCoord<f64>> = batch
            .coords
            .iter()
            .zip(v.chunks_exact(4))
            .map(|(c, q)| SemanticCoord { d: q[0], s: Vec3::new(q[1], q[2], q[3]), bone: c.bone })
            .collect();
        batch.objective(&params, &coords, &batch.shapes)
    };
    out.push(check_all("field.inputs", cfg, tamper, x, analytic, 1e-5, &f));
    out
}

// ---- compositing ----

fn composite_components(cfg: &GradCheckConfig, tamper: &mut dyn FnMut(&str, &mut [f64])) -> Vec<ComponentReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xc0);
    let n = 16;
    let colors: Vec<Vec3<f64>> = (0..n).map(|_| Vec3::new(rng.gen(), rng.gen(), rng.gen())).collect();
    let tau: Vec<f64> = (0..n).map(|_| uniform(&mut rng, 0.0, 20.0)).collect();
    let delta: Vec<f64> = (0..n).map(|_| uniform(&mut rng, 0.005, 0.05)).collect();
    let dc = random_vec(&mut rng);
    let dm = uniform(&mut rng, -1.0, 1.0);
    let dw: Vec<f64> = (0..n).map(|_| uniform(&mut rng, -1.0, 1.0)).collect();
    let objective = |colors: &[Vec3<f64>], tau: &[f64]| {
        let c = composite(colors, tau, &delta);
        c.color.dot(dc) + c.mask * dm + c.weights.iter().zip(&dw).map(|(a, b)| a * b).sum::<f64>()
    };
    let g = composite_backward(&colors, &tau, &delta, dc, dm, Some(&dw)).expect("matching lengths");
    let x: Vec<f64> = colors.iter().flat_map(|c| c.to_f64()).collect();
    let analytic: Vec<f64> = g.colors.iter().flat_map(|c| c.to_f64()).collect();
    let f = |v: &[f64]| {
        let cs: Vec<Vec3<f64>> = v.chunks_exact(3).map(|c| Vec3::new(c[0], c[1], c[2])).collect();
        objective(&cs, &tau)
    };
    let a = check_all("composite.color", cfg, tamper, x, analytic, 1e-6, &f);
    let f = |v: &[f64]| objective(&colors, v);
    let b = check_all("composite.density", cfg, tamper, tau.clone(), g.tau.clone(), 1e-6, &f);
    vec![a, b]
}

// ---- loss terms ----

fn random_hist(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64, scale: f64) -> Histogram<f64> {
    let mut cuts: Vec<f64> = (0..n - 1).map(|_| uniform(rng, lo, hi)).collect();
    cuts.sort_by(f64::total_cmp);
    let mut edges = vec![lo];
    edges.extend(cuts);
    edges.push(hi);
    let weights = (0..n).map(|_| uniform(rng, 0.0, scale)).collect();
    Histogram { edges, weights }
}

fn loss_components(cfg: &GradCheckConfig, tamper: &mut dyn FnMut(&str, &mut [f64])) -> Vec<ComponentReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x1055);
    let mut out = Vec::new();
    let h = 1e-6;

    let a: Vec<f64> = (0..16).map(|_| uniform(&mut rng, 0.0, 5.0)).collect();
    let b: Vec<f64> = (0..16).map(|_| uniform(&mut rng, 0.0, 5.0)).collect();
    let (da, db) = density_loss_grad(&a, &b).expect("matching lengths");
    let x: Vec<f64> = a.iter().chain(&b).copied().collect();
    let analytic: Vec<f64> = da.iter().chain(&db).copied().collect();
    let f = |v: &[f64]| density_loss(&v[..16], &v[16..]).unwrap_or(f64::NAN);
    out.push(check_all("loss.density", cfg, tamper, x, analytic, h, &f));

    let n = 8;
    let w: Vec<f64> = (0..n).map(|_| rng.gen()).collect();
    let pred: Vec<Vec3<f64>> = (0..n).map(|_| random_vec(&mut rng).normalize()).collect();
    let dens: Vec<Option<Vec3<f64>>> =
        (0..n).map(|i| if i == 3 { None } else { Some(random_vec(&mut rng).normalize()) }).collect();
    let view = random_vec(&mut rng).normalize();
    let split = |v: &[f64]| -> (Vec<f64>, Vec<Vec3<f64>>) {
        (v[..n].to_vec(), v[n..].chunks_exact(3).map(|c| Vec3::new(c[0], c[1], c[2])).collect())
    };
    let nl = normal_loss_ray(&w, &pred, &dens, false).expect("matching lengths");
    let x: Vec<f64> = w.iter().copied().chain(pred.iter().flat_map(|p| p.to_f64())).collect();
    let analytic: Vec<f64> = nl.d_weights.iter().copied().chain(nl.d_normals.iter().flat_map(|p| p.to_f64())).collect();
    let f = |v: &[f64]| {
        let (w, p) = split(v);
        normal_loss_ray(&w, &p, &dens, false).map(|t| t.value).unwrap_or(f64::NAN)
    };
    out.push(check_all("loss.normal", cfg, tamper, x, analytic, h, &f));

    let ol = orientation_loss_ray(&w, &dens, view).expect("matching lengths");
    let x: Vec<f64> = w.iter().copied().chain(dens.iter().flat_map(|p| p.unwrap_or(Vec3::zero()).to_f64())).collect();
    let analytic: Vec<f64> = ol.d_weights.iter().copied().chain(ol.d_normals.iter().flat_map(|p| p.to_f64())).collect();
    let f = |v: &[f64]| {
        let (w, p) = split(v);
        let normals: Vec<Option<Vec3<f64>>> = p.into_iter().zip(&dens).map(|(p, d)| d.map(|_| p)).collect();
        orientation_loss_ray(&w, &normals, view).map(|t| t.value).unwrap_or(f64::NAN)
    };
    out.push(check_all("loss.orientation", cfg, tamper, x, analytic, h, &f));

    let coarse = random_hist(&mut rng, 12, 1.0, 3.0, 0.3);
    let fine = random_hist(&mut rng, 16, 1.2, 2.8, 0.6);
    let (_, g) = proposal_loss_ray(&coarse, &fine).expect("valid histograms");
    let f = |v: &[f64]| {
        let c = Histogram { edges: coarse.edges.clone(), weights: v.to_vec() };
        proposal_loss_ray(&c, &fine).map(|r| r.0).unwrap_or(f64::NAN)
    };
    out.push(check_all("loss.proposal", cfg, tamper, coarse.weights.clone(), g, h, &f));

    let m: Vec<f64> = (0..16).map(|_| uniform(&mut rng, 0.01, 0.99)).collect();
    let gm = mask_loss_grad(&m);
    let f = |v: &[f64]| mask_loss(v).unwrap_or(f64::NAN);
    out.push(check_all("loss.mask", cfg, tamper, m.clone(), gm, h, &f));
    out
}

// ---- full per-ray pipeline ----

struct RenderCase {
    cfg: SkeletonConfig,
    pose: Pose<f64>,
    shape: Shape<f64>,
    params: FieldParams<f64>,
    lighting: ShLighting<f64>,
    settings: RenderSettings,
    records: Vec<RayRecord<f64>>,
    upstream: Vec<RayUpstream<f64>>,
}

impl RenderCase {
    fn new(check: &GradCheckConfig) -> Option<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(check.seed ^ 0x4e4d);
        // A softer proxy keeps finite differences through the geometry well conditioned.
        let cfg = SkeletonConfig::default().with_sharpness(300.0).ok()?;
        if cfg.joint_count() != check.arch.joints {
            return None;
        }
        let pose = random_pose(&mut rng, check.arch.joints, 0.3);
        let shape = random_shape(&mut rng, 0.9, 1.1);
        let mut params = FieldParams::init(check.seed, &check.arch).ok()?;
        let layout = params.layout().clone();
        params.values[layout.density.bias()][0] = 4.0;
        params.values[layout.proposal_out.bias()][0] = 2.0;
        let mut lighting = ShLighting::uniform(0.6);
        for c in lighting.coeffs[1..].iter_mut() {
            *c = uniform(&mut rng, -0.1, 0.1);
        }
        let settings = RenderSettings { n_coarse: 16, n_fine: 12, ..RenderSettings::default() };
        let body = PosedBody::new(&cfg, &pose, &shape).ok()?;
        let camera = Camera {
            azimuth: 0.3,
            elevation: 0.1,
            radius: 2.6,
            look_at: body.region_bounds(Region::FullBody).center(),
            focal: 22.0,
            width: 24,
            height: 24,
        };
        let ev = params.evaluator(&pose, &shape).ok()?;
        let scene = Scene {
            body: &body,
            lighting: &lighting,
            settings: &settings,
            mode: RenderMode::Shaded,
            density_normals: false,
        };
        let all: Vec<usize> = (0..camera.pixel_count()).collect();
        let records: Vec<RayRecord<f64>> = render_pixels(&scene, &ev, &camera, &all, Some(5))
            .into_iter()
            .filter(|r| r.samples.is_some() && r.mask > 0.05)
            .step_by(9)
            .take(12)
            .collect();
        if records.is_empty() {
            return None;
        }
        let mut upstream = Vec::new();
        for _ in &records {
            let mut u = RayUpstream::zeros(settings.n_fine, settings.n_coarse);
            u.color = random_vec(&mut rng);
            u.mask = uniform(&mut rng, -1.0, 1.0);
            for k in 0..settings.n_fine {
                u.weights[k] = uniform(&mut rng, -1.0, 1.0);
                u.normal_pred[k] = random_vec(&mut rng);
                u.tau_raw[k] = 0.01 * uniform(&mut rng, -1.0, 1.0);
                u.tau_proxy[k] = 0.01 * uniform(&mut rng, -1.0, 1.0);
            }
            for j in 0..settings.n_coarse {
                u.coarse_weights[j] = uniform(&mut rng, -1.0, 1.0);
            }
            upstream.push(u);
        }
        Some(Self { cfg, pose, shape, params, lighting, settings, records, upstream })
    }

    /// Upstream-weighted outputs re-evaluated at the recorded sample positions.
    fn objective(&self, params: &FieldParams<f64>, shape: &Shape<f64>, lighting: &ShLighting<f64>) -> f64 {
        let Ok(body) = PosedBody::new(&self.cfg, &self.pose, shape) else { return f64::NAN };
        let Ok(ev) = params.evaluator(&self.pose, shape) else { return f64::NAN };
        let a = body.sharpness();
        let mut total = 0.0;
        for (r, u) in self.records.iter().zip(&self.upstream) {
            let s = r.samples.as_ref().expect("records were filtered");
            let mut colors = Vec::with_capacity(s.t.len());
            let mut tau = Vec::with_capacity(s.t.len());
            for k in 0..s.t.len() {
                let c = body.evaluate(s.positions[k]);
                let out = ev.eval(&c);
                let proxy = density_proxy(c.d, a);
                let nw = body.bone_rotation(c.bone).mul_vec(out.normal);
                colors.push(lighting.shade(out.albedo, nw));
                tau.push(composite_density(out.density, proxy));
                total += u.normal_pred[k].dot(nw) + u.tau_raw[k] * out.density + u.tau_proxy[k] * proxy;
            }
            let comp = composite(&colors, &tau, &s.delta);
            total += u.color.dot(comp.color) + u.mask * comp.mask;
            total += comp.weights.iter().zip(&u.weights).map(|(a, b)| a * b).sum::<f64>();
            let coarse_tau: Vec<f64> = s
                .coarse_coords
                .iter()
                .zip(&s.coarse_proxy)
                .map(|(c, &p)| composite_density(ev.proposal_density(c), p))
                .collect();
            let delta: Vec<f64> = s.coarse.edges.windows(2).map(|w| w[1] - w[0]).collect();
            let cw = composite(&vec![Vec3::zero(); coarse_tau.len()], &coarse_tau, &delta).weights;
            total += cw.iter().zip(&u.coarse_weights).map(|(a, b)| a * b).sum::<f64>();
        }
        total
    }
}

fn render_components(cfg: &GradCheckConfig, tamper: &mut dyn FnMut(&str, &mut [f64])) -> Vec<ComponentReport> {
    let Some(case) = RenderCase::new(cfg) else {
        return vec![Tally::new().finish("render.setup", cfg)];
    };
    let body = PosedBody::new(&case.cfg, &case.pose, &case.shape).expect("built in setup");
    let ev = case.params.evaluator(&case.pose, &case.shape).expect("built in setup");
    let scene = Scene {
        body: &body,
        lighting: &case.lighting,
        settings: &case.settings,
        mode: RenderMode::Shaded,
        density_normals: false,
    };
    let mut sink = GradSink::new(&ev);
    for (r, u) in case.records.iter().zip(&case.upstream) {
        if backward_ray(&scene, &ev, r, u, &mut sink).is_err() {
            return vec![Tally::new().finish("render.backward", cfg)];
        }
    }
    let cond_beta = ev.finalize(&mut sink.field);
    let mut out = Vec::new();

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x9a);
    let mut analytic = sink.field.params.clone();
    tamper("render.field", &mut analytic);
    let arch = case.params.arch().clone();
    let f = |v: &[f64]| match FieldParams::from_values(&arch, v.to_vec()) {
        Ok(p) => case.objective(&p, &case.shape, &case.lighting),
        Err(_) => f64::NAN,
    };
    let mut x = case.params.values.clone();
    let mut t = Tally::new();
    for _ in 0..cfg.probes.div_ceil(2) {
        let i = rng.gen_range(0..x.len());
        let p = probe(&f, &mut x, i, 1e-5);
        t.add(&p, analytic[i], cfg.tolerance);
    }
    out.push(t.finish("render.field", cfg));

    let analytic: Vec<f64> = (0..SHAPE_DIM).map(|k| sink.shape[k] + cond_beta[k]).collect();
    let f = |v: &[f64]| {
        let mut s = case.shape;
        s.beta.copy_from_slice(v);
        case.objective(&case.params, &s, &case.lighting)
    };
    out.push(check_all("render.shape", cfg, tamper, case.shape.beta.to_vec(), analytic, 1e-6, &f));

    let f = |v: &[f64]| {
        let mut l = case.lighting;
        l.coeffs.copy_from_slice(&v[..SH_COEFFS]);
        case.objective(&case.params, &case.shape, &l)
    };
    out.push(check_all("render.lighting", cfg, tamper, case.lighting.coeffs.to_vec(), sink.lighting.to_vec(), 1e-6, &f));
    out
}
