//! Acceptance suite. Prints one line per criterion and exits non-zero if any fails.
//!
//! Pass criterion numbers as arguments to run a subset.

mod common;

use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use avatar_core::body::{Pose, PosedBody, Region, Shape, SkeletonConfig};
use avatar_core::export::{CameraSpec, PoseSequence};
use avatar_core::field::{FieldArch, FieldParams};
use avatar_core::gradcheck::{self, GradCheckConfig};
use avatar_core::guidance::{
    gaussian_image, psnr, sds_gradient, sds_gradient_with_draws, AnalyticGaussianDenoiser, ConstantDenoiser,
    DiffusionSchedule, SdsDraw, SdsRequest,
};
use avatar_core::losses::{mask_loss, mask_loss_grad, mask_term, mask_term_derivative};
use avatar_core::math::Vec3;
use avatar_core::procedural::ProceduralAvatar;
use avatar_core::render::{composite, Camera, Image, RenderMode, RenderSettings, Scene, ShLighting};
use avatar_core::trainer::{
    procedural_dataset, render_state, Checkpoint, PoseSampler, PoseSamplerConfig, ProceduralDatasetSpec, TrainConfig,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    pass: bool,
    detail: String,
}

impl Outcome {
    fn new(pass: bool, detail: impl Into<String>) -> Self {
        Self { pass, detail: detail.into() }
    }
}

fn avatar(args: &[&str]) -> Result<String, String> {
    let out = Command::new(env!("CARGO_BIN_EXE_avatar"))
        .args(args)
        .output()
        .map_err(|e| e.to_string())?;
    if out.status.success() {
        Ok(String::from_utf8_lossy(&out.stdout).into_owned())
    } else {
        Err(format!("`avatar {}` exited {:?}: {}", args.join(" "), out.status.code(), String::from_utf8_lossy(&out.stderr)))
    }
}

fn s(p: &Path) -> &str {
    p.to_str().expect("utf-8 temp path")
}

// ---- 1: compositing ----

/// Direct sum with explicit transmittance products.
fn composite_direct(colors: &[Vec3<f64>], tau: &[f64], delta: &[f64]) -> (Vec3<f64>, Vec<f64>, f64) {
    let alpha: Vec<f64> = tau.iter().zip(delta).map(|(t, d)| 1.0 - (-t * d).exp()).collect();
    let weights: Vec<f64> = (0..tau.len())
        .map(|i| alpha[..i].iter().map(|a| 1.0 - a).product::<f64>() * alpha[i])
        .collect();
    let color = colors.iter().zip(&weights).fold(Vec3::zero(), |acc, (c, w)| acc + *c * *w);
    (color, weights.clone(), weights.iter().sum())
}

fn rel(a: f64, b: f64) -> f64 {
    if a == b {
        0.0
    } else {
        (a - b).abs() / a.abs().max(b.abs())
    }
}

fn compositing() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let colors: Vec<Vec3<f64>> = (0..16).map(|_| Vec3::new(rng.gen(), rng.gen(), rng.gen())).collect();
        let tau: Vec<f64> = (0..16).map(|_| if rng.gen_bool(0.25) { 0.0 } else { rng.gen_range(0.0..60.0) }).collect();
        let delta: Vec<f64> = (0..16).map(|_| rng.gen_range(0.001..0.1)).collect();
        let c = composite(&colors, &tau, &delta);
        let (oc, ow, om) = composite_direct(&colors, &tau, &delta);
        // contributions below the last bit of the total are not resolvable by either side
        let floor = |total: f64, a: f64, b: f64| if a.abs().max(b.abs()) < 1e-12 * total.max(1e-300) { 0.0 } else { rel(a, b) };
        for k in 0..3 {
            worst = worst.max(rel(c.color[k], oc[k]));
        }
        for (a, b) in c.weights.iter().zip(&ow) {
            worst = worst.max(floor(om, *a, *b));
        }
        worst = worst.max(rel(c.mask, om));
    }
    let elapsed = start.elapsed();
    Outcome::new(
        worst < 1e-6 && elapsed < Duration::from_secs(5),
        format!("1000 rays x 16 samples, max rel err {worst:.2e}, {:.2} s", elapsed.as_secs_f64()),
    )
}

// ---- 2: gradients ----

fn gradients() -> Outcome {
    let start = Instant::now();
    let cfg = GradCheckConfig::default();
    let report = gradcheck::run(&cfg);
    let elapsed = start.elapsed();
    let failing: Vec<&str> = report.components.iter().filter(|c| !c.ok).map(|c| c.name.as_str()).collect();
    let worst = report
        .components
        .iter()
        .map(|c| c.passed as f64 / c.compared.max(1) as f64)
        .fold(1.0, f64::min);
    let mut detail = format!(
        "width {}, {} probes, {} components, worst pass fraction {:.3}, {:.1} s",
        cfg.arch.width,
        cfg.probes,
        report.components.len(),
        worst,
        elapsed.as_secs_f64()
    );
    if !failing.is_empty() {
        detail.push_str(&format!(", failing: {}", failing.join(" ")));
    }
    Outcome::new(report.passed() && elapsed < Duration::from_secs(120), detail)
}

// ---- 3: silhouette at init ----

fn random_camera(rng: &mut ChaCha8Rng, look_at: Vec3<f64>, size: usize) -> Camera<f64> {
    Camera {
        azimuth: rng.gen_range(0.0..std::f64::consts::TAU),
        elevation: rng.gen_range(-0.3..0.9),
        radius: rng.gen_range(2.2..3.0),
        look_at,
        focal: rng.gen_range(45.0..70.0) * size as f64 / 64.0,
        width: size,
        height: size,
    }
}

fn silhouette() -> Outcome {
    let start = Instant::now();
    let sk = SkeletonConfig::default();
    let params = FieldParams::<f32>::init(0, &FieldArch::default()).expect("default arch");
    let settings = RenderSettings::default();
    let lighting = ShLighting::uniform(1.0);
    let sampler = PoseSampler::new(&PoseSamplerConfig::default(), &sk).expect("default prior");
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let mut scores = Vec::new();
    for _ in 0..20 {
        let mut pose = sampler.sample(&mut rng);
        pose.joint_rotations[0] = Vec3::new(0.0, rng.gen_range(-3.1..3.1), 0.0);
        let body64 = PosedBody::new(&sk, &pose, &Shape::mean()).expect("pose");
        let body = PosedBody::new(&sk, &pose.cast::<f32>(), &Shape::mean()).expect("pose");
        let ev = params.evaluator(&pose.cast(), &Shape::mean()).expect("evaluator");
        let center = body64.region_bounds(Region::FullBody).center();
        for _ in 0..5 {
            let cam = random_camera(&mut rng, center, 64);
            let scene = Scene {
                body: &body,
                lighting: &lighting,
                settings: &settings,
                mode: RenderMode::Mask,
                density_normals: false,
            };
            let out = avatar_core::render::render(&scene, &ev, &cam.cast()).expect("render");
            let mask: Vec<bool> = out.mask.data.iter().map(|&m| m >= 0.5).collect();
            let oracle: Vec<bool> = (0..cam.pixel_count()).map(|p| common::sdf_hit(&body64, &cam.pixel_ray(p))).collect();
            scores.push(common::iou(&mask, &oracle));
        }
    }
    let elapsed = start.elapsed();
    let mean = scores.iter().sum::<f64>() / scores.len() as f64;
    let min = scores.iter().cloned().fold(1.0, f64::min);
    Outcome::new(
        mean >= 0.95 && elapsed < Duration::from_secs(120),
        format!("{} views, mean IoU {mean:.4}, min {min:.4}, {:.1} s", scores.len(), elapsed.as_secs_f64()),
    )
}

// ---- 4: score distillation ----

fn norm_diff(a: &Image<f64>, b: &Image<f64>) -> f64 {
    a.data.iter().zip(&b.data).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

fn score_distillation() -> Outcome {
    let schedule = DiffusionSchedule::default();
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let request = SdsRequest { prompt: "a person", scale: 100.0 };
    let u: Image<f64> = gaussian_image(&mut rng, 64, 64, 3);
    let mut nonzero = 0;
    for _ in 0..20 {
        let draw = SdsDraw {
            t: schedule.sample_t(&mut rng),
            eps: gaussian_image(&mut rng, 64, 64, 3),
        };
        let mut echo = ConstantDenoiser(draw.eps.clone());
        let g = sds_gradient_with_draws(&u, &mut echo, &request, &[draw], &schedule).expect("sds");
        nonzero += g.grad.data.iter().filter(|&&v| v != 0.0).count();
    }

    let mu: Image<f64> = Image::from_data(64, 64, 3, (0..64 * 64 * 3).map(|_| rng.gen()).collect()).expect("image");
    let mut u: Image<f64> = Image::from_data(64, 64, 3, (0..64 * 64 * 3).map(|_| rng.gen()).collect()).expect("image");
    let mut denoiser = AnalyticGaussianDenoiser::new(mu.clone(), 0.0, schedule.clone()).expect("denoiser");
    let initial = norm_diff(&u, &mu);
    let mut steps = None;
    for step in 1..=500 {
        let g = sds_gradient(&u, &mut denoiser, &request, &mut rng, &schedule, 1).expect("sds");
        for (v, gv) in u.data.iter_mut().zip(&g.grad.data) {
            *v -= 0.1 * gv;
        }
        if steps.is_none() && norm_diff(&u, &mu) < 0.01 * initial {
            steps = Some(step);
        }
    }
    let ratio = norm_diff(&u, &mu) / initial;
    Outcome::new(
        nonzero == 0 && ratio < 0.01,
        format!(
            "echo denoiser: {nonzero} nonzero gradient entries over 20 draws; Gaussian target: final/initial {ratio:.2e}, below 1% at step {}",
            steps.map_or("never".to_string(), |s| s.to_string())
        ),
    )
}

// ---- 5 and 6: reconstruction and reposing ----

const RECON_CONFIG: &str = r#"
prompt = "a person"
iterations = 3000
seed = 0
resolution = 64
rays_per_step = 512
checkpoint_every = 1000

[lr]
cosine_decay = false

[loss]
sds = 100.0
mask = 0.1

[lighting]
p_rand = 0.0

[field]
width = 32
layers = 3

[render]
n_coarse = 32
n_fine = 16
"#;

fn reconstruction(work: &Path) -> (Outcome, Option<PathBuf>) {
    let start = Instant::now();
    let cfg_path = work.join("recon.toml");
    std::fs::write(&cfg_path, RECON_CONFIG).expect("write config");
    let data = work.join("targets");
    let run_dir = work.join("recon");
    let trained = avatar(&["dataset", "--out", s(&data), "--views", "64", "--resolution", "64", "--seed", "0"]).and_then(|_| {
        avatar(&[
            "optimize",
            "--config",
            s(&cfg_path),
            "--out",
            s(&run_dir),
            "--guidance",
            &format!("builtin:photometric:{}", s(&data)),
        ])
    });
    if let Err(e) = trained {
        return (Outcome::new(false, e), None);
    }
    let ckpt_path = run_dir.join("final.dhck");
    let ckpt = match Checkpoint::load(&ckpt_path) {
        Ok(c) => c,
        Err(e) => return (Outcome::new(false, e.to_string()), None),
    };
    let sk = SkeletonConfig::default();
    let cfg = TrainConfig::from_toml_str(RECON_CONFIG).expect("config");
    let held = procedural_dataset(&sk, &ProceduralDatasetSpec { views: 8, seed: 9_999, ..Default::default() }).expect("held-out views");
    let (mut p_sum, mut iou_sum) = (0.0, 0.0);
    for v in &held.views {
        let out = render_state(&ckpt.state, &sk, &v.pose, &v.camera, &cfg.render, RenderMode::Shaded, false).expect("render");
        p_sum += psnr(&out.color, &v.image).expect("psnr");
        let a: Vec<bool> = out.mask.data.iter().map(|&m| m > 0.5).collect();
        let b: Vec<bool> = v.mask.as_ref().expect("mask").data.iter().map(|&m| m > 0.5).collect();
        iou_sum += common::iou(&a, &b);
    }
    let n = held.views.len() as f64;
    let (p, iou) = (p_sum / n, iou_sum / n);
    let elapsed = start.elapsed();
    let outcome = Outcome::new(
        p >= 25.0 && iou >= 0.90 && ckpt.state.step <= 20_000 && elapsed <= Duration::from_secs(1800),
        format!(
            "{} steps, held-out PSNR {p:.2} dB, mask IoU {iou:.4} over {} views, {:.0} s",
            ckpt.state.step,
            held.views.len(),
            elapsed.as_secs_f64()
        ),
    );
    (outcome, Some(ckpt_path))
}

/// Left/right shoulder and elbow bones.
const ARM_BONES: [usize; 4] = [4, 5, 7, 8];

fn arm_swing() -> PoseSequence {
    let frames = (0..30)
        .map(|k| {
            let phase = 0.5 * (1.0 - (std::f64::consts::TAU * k as f64 / 30.0).cos());
            let mut p = Pose::rest(16);
            p.joint_rotations[4] = Vec3::new(0.0, 0.0, -1.2 * phase);
            p.joint_rotations[7] = Vec3::new(0.0, 0.0, 1.2 * phase);
            p.joint_rotations[5] = Vec3::new(0.0, -0.5 * phase, 0.0);
            p.joint_rotations[8] = Vec3::new(0.0, 0.5 * phase, 0.0);
            p
        })
        .collect();
    PoseSequence { fps: 30.0, frames }
}

/// Pixel showing the front-facing surface point at fraction `h` along `bone`, if unoccluded.
fn tracked_pixel(body: &PosedBody<f64>, cam: &Camera<f64>, bone: usize, h: f64) -> Option<usize> {
    let (a, b, r) = body.capsule(bone);
    let p = a + (b - a) * h + body.bone_rotation(bone).mul_vec(Vec3::new(0.0, 0.0, r));
    let (u, v) = cam.project(p)?;
    let (col, row) = (u.floor() as isize, v.floor() as isize);
    let footprint = (cam.origin() - p).norm() / cam.focal;
    // the pixel and its 4-neighbourhood must all see this bone near the point
    for (dc, dr) in [(0, 0), (1, 0), (-1, 0), (0, 1), (0, -1)] {
        let (c, r) = (col + dc, row + dr);
        if c < 0 || r < 0 || c >= cam.width as isize || r >= cam.height as isize {
            return None;
        }
        let (t, coord) = common::sdf_trace(body, &cam.ray(c as usize, r as usize))?;
        let hit = cam.ray(c as usize, r as usize).at(t);
        if coord.bone != bone || (hit - p).norm() > 2.5 * footprint {
            return None;
        }
    }
    Some(row as usize * cam.width + col as usize)
}

fn reposing(work: &Path, ckpt: Option<&Path>) -> Outcome {
    let Some(ckpt) = ckpt else {
        return Outcome::new(false, "no trained checkpoint");
    };
    let seq = arm_swing();
    let seq_path = work.join("swing.json");
    std::fs::write(&seq_path, seq.to_json()).expect("write sequence");
    let frames_dir = work.join("swing");
    let spec = "0.0,0.1,2.6,140";
    if let Err(e) = avatar(&[
        "animate", "--checkpoint", s(ckpt), "--pose", s(&seq_path), "--mode", "albedo", "--resolution", "128", "--camera", spec,
        "--out", s(&frames_dir),
    ]) {
        return Outcome::new(false, e);
    }
    let sk = SkeletonConfig::default();
    let state = Checkpoint::load(ckpt).expect("checkpoint").state;
    let cam = spec.parse::<CameraSpec>().expect("spec").camera(&sk, &state.shape, 128).expect("camera");
    let shape: Shape<f64> = state.shape.cast();
    let avatar_gt = ProceduralAvatar::<f64>::new(&sk);
    let points: Vec<(usize, f64)> = ARM_BONES.iter().flat_map(|&b| [0.3, 0.5, 0.7].map(|h| (b, h))).collect();
    let mut reference: Vec<Option<Vec3<f64>>> = vec![None; points.len()];
    let (mut drift, mut count, mut gt_err, mut gt_count) = (0.0, 0usize, 0.0, 0usize);
    for (k, pose) in seq.frames.iter().enumerate() {
        let img = match Image::<f32>::read_png(&frames_dir.join(format!("frame_{:06}.png", k + 1))) {
            Ok(i) => i,
            Err(e) => return Outcome::new(false, format!("frame {}: {e}", k + 1)),
        };
        let body = PosedBody::new(&sk, pose, &shape).expect("pose");
        for (i, &(bone, h)) in points.iter().enumerate() {
            let Some(px) = tracked_pixel(&body, &cam, bone, h) else { continue };
            let albedo = img.rgb(px).cast::<f64>();
            let truth = avatar_gt.bone_albedo(bone);
            gt_err += (0..3).map(|c| (albedo[c] - truth[c]).abs()).sum::<f64>() / 3.0;
            gt_count += 1;
            match reference[i] {
                None if k == 0 => reference[i] = Some(albedo),
                Some(r) => {
                    drift += (0..3).map(|c| (albedo[c] - r[c]).abs()).sum::<f64>() / 3.0;
                    count += 1;
                }
                None => {}
            }
        }
    }
    let tracked = reference.iter().filter(|r| r.is_some()).count();
    let possible = tracked * (seq.frames.len() - 1);
    if count == 0 || count * 2 < possible {
        return Outcome::new(false, format!("only {count} of {possible} tracked samples visible"));
    }
    let drift = drift / count as f64;
    Outcome::new(
        drift < 0.05,
        format!(
            "{} frames, {tracked} tracked points, {count} samples, mean albedo drift {drift:.4}, error vs ground truth {:.4}",
            seq.frames.len(),
            gt_err / gt_count as f64
        ),
    )
}

// ---- 7: mask loss ----

fn mask_pressure() -> Outcome {
    let probes: Vec<f64> = (0..100).map(|k| 0.005 + 0.99 * k as f64 / 99.0).collect();
    let mut wrong = 0;
    for &m in &probes {
        let d = mask_term_derivative(m);
        // one descent step moves M away from 0.5
        let next = m - 1e-4 * d;
        let pushed = if m > 0.5 { next > m } else { next < m };
        let h = 1e-7;
        let fd = (mask_term(m + h) - mask_term(m - h)) / (2.0 * h);
        if !pushed || (fd - d).abs() > 1e-4 * d.abs() {
            wrong += 1;
        }
    }
    let peak = mask_term(0.5);
    let maximal = probes.iter().all(|&m| mask_term(m) < peak);
    let batch_ok = mask_loss(&probes).expect("loss") < peak
        && mask_loss_grad(&probes).iter().zip(&probes).all(|(g, m)| (*g < 0.0) == (*m > 0.5));
    Outcome::new(
        wrong == 0 && maximal && batch_ok,
        format!("{} probes, {wrong} with wrong sign or slope, maximal at 0.5: {maximal}", probes.len()),
    )
}

// ---- 8: determinism ----

const DETERMINISM_CONFIG: &str = r#"
prompt = "a person"
iterations = 100
seed = 8
resolution = 32
rays_per_step = 256
checkpoint_every = 50

[field]
width = 16
layers = 2

[render]
n_coarse = 32
n_fine = 16
"#;

fn determinism(work: &Path) -> Outcome {
    let cfg = work.join("det.toml");
    std::fs::write(&cfg, DETERMINISM_CONFIG).expect("write config");
    let mean = work.join("mean.png");
    let img = Image::<f32>::from_data(32, 32, 3, (0..32 * 32 * 3).map(|i| (i % 97) as f32 / 96.0).collect()).expect("image");
    img.write_png(&mean).expect("write mean");
    let guidance = format!("builtin:gaussian:{}", s(&mean));
    let run = |dir: &str, resume: Option<PathBuf>| {
        let out = work.join(dir);
        let mut args = vec!["optimize", "--config", s(&cfg), "--out", s(&out), "--guidance", &guidance];
        let resume = resume.map(|p| p.to_string_lossy().into_owned());
        if let Some(r) = &resume {
            args.extend(["--resume", r.as_str()]);
        }
        avatar(&args).map(|_| out)
    };
    let result = (|| -> Result<(bool, bool), String> {
        let a = run("det_a", None)?;
        let b = run("det_b", None)?;
        let c = run("det_c", Some(a.join("step_000050.dhck")))?;
        let read = |p: PathBuf| std::fs::read(&p).map_err(|e| format!("{}: {e}", p.display()));
        let same = read(a.join("step_000100.dhck"))? == read(b.join("step_000100.dhck"))?;
        let resumed = read(a.join("final.dhck"))? == read(c.join("final.dhck"))?;
        Ok((same, resumed))
    })();
    match result {
        Ok((same, resumed)) => Outcome::new(
            same && resumed,
            format!("SDS run, step 100 checkpoints identical: {same}; resume from step 50 identical: {resumed}"),
        ),
        Err(e) => Outcome::new(false, e),
    }
}

fn main() {
    let selected: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let want = |n: u32| selected.is_empty() || selected.contains(&n);
    let work = tempfile::tempdir().expect("temp dir");
    let mut results: Vec<(u32, &str, Outcome)> = Vec::new();
    let mut record = |n: u32, name: &'static str, f: &mut dyn FnMut() -> Outcome| {
        if want(n) {
            let o = f();
            println!("criterion {n} {name}: {} ({})", if o.pass { "PASS" } else { "FAIL" }, o.detail);
            results.push((n, name, o));
        }
    };
    record(1, "compositing oracle", &mut compositing);
    record(2, "gradient suite", &mut gradients);
    record(3, "proxy-floor silhouette", &mut silhouette);
    record(4, "score distillation", &mut score_distillation);
    let mut ckpt = None;
    record(5, "reconstruction", &mut || {
        let (o, c) = reconstruction(work.path());
        ckpt = c;
        o
    });
    if want(6) && ckpt.is_none() && !want(5) {
        ckpt = reconstruction(work.path()).1;
    }
    record(6, "reposing consistency", &mut || reposing(work.path(), ckpt.as_deref()));
    record(7, "mask-loss pressure", &mut mask_pressure);
    record(8, "determinism", &mut || determinism(work.path()));
    let failed = results.iter().filter(|r| !r.2.pass).count();
    println!("acceptance: {} of {} criteria passed", results.len() - failed, results.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
