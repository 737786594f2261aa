use std::path::{Path, PathBuf};
use std::process::{Command, Output};

mod common;

use avatar_core::body::{PosedBody, Pose, SkeletonConfig};
use avatar_core::export::{CameraSpec, PoseSequence};
use avatar_core::math::Vec3;
use avatar_core::render::Image;
use avatar_core::trainer::{Checkpoint, TrainConfig, TrainState};

const CONFIG: &str = r#"
prompt = "a person"
iterations = 10
resolution = 24
checkpoint_every = 5
rays_per_step = 128
seed = 4

[field]
width = 16
layers = 2
bands = 3
proposal_width = 8
proposal_layers = 1

[render]
n_coarse = 16
n_fine = 8
"#;

fn avatar(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_avatar")).args(args).output().expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

struct Workspace {
    dir: tempfile::TempDir,
}

impl Workspace {
    fn new() -> Self {
        let ws = Self { dir: tempfile::tempdir().unwrap() };
        std::fs::write(ws.path("cfg.toml"), CONFIG).unwrap();
        ws
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn arg(&self, name: &str) -> String {
        self.path(name).to_str().unwrap().to_string()
    }

    fn dataset(&self) -> String {
        let out = avatar(&["dataset", "--out", &self.arg("data"), "--views", "4", "--resolution", "24", "--config", &self.arg("cfg.toml")]);
        assert_eq!(code(&out), 0, "{}", stderr(&out));
        format!("builtin:photometric:{}", self.arg("data"))
    }

    /// Checkpoint of an untrained state.
    fn fresh_checkpoint(&self) -> String {
        let cfg = TrainConfig::from_toml_str(CONFIG).unwrap();
        let ckpt = Checkpoint::new(TrainState::init(&cfg).unwrap(), &SkeletonConfig::default(), None);
        ckpt.save(&self.path("fresh.dhck")).unwrap();
        self.arg("fresh.dhck")
    }
}

#[test]
fn ten_step_photometric_run_writes_checkpoints_and_metrics() {
    let ws = Workspace::new();
    let guidance = ws.dataset();
    let out = avatar(&["optimize", "--config", &ws.arg("cfg.toml"), "--out", &ws.arg("run"), "--guidance", &guidance]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    for f in ["final.dhck", "step_000005.dhck", "step_000010.dhck"] {
        assert!(ws.path("run").join(f).exists(), "missing {f}");
    }
    let ckpt = Checkpoint::load(&ws.path("run/final.dhck")).unwrap();
    assert_eq!(ckpt.state.step, 10);
    let metrics = std::fs::read_to_string(ws.path("run/metrics.jsonl")).unwrap();
    let lines: Vec<serde_json::Value> = metrics.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 10);
    assert_eq!(lines[9]["step"], 10);
    assert!(lines.iter().all(|l| l["total"].as_f64().unwrap().is_finite()));
}

#[test]
fn runs_are_deterministic_and_resume_bit_exactly() {
    let ws = Workspace::new();
    let guidance = ws.dataset();
    let cfg = ws.arg("cfg.toml");
    for dir in ["a", "b"] {
        let out = avatar(&["optimize", "--config", &cfg, "--out", &ws.arg(dir), "--guidance", &guidance]);
        assert_eq!(code(&out), 0, "{}", stderr(&out));
    }
    let a = std::fs::read(ws.path("a/final.dhck")).unwrap();
    assert_eq!(a, std::fs::read(ws.path("b/final.dhck")).unwrap());

    let resume = ws.arg("a/step_000005.dhck");
    let out = avatar(&["--json", "optimize", "--config", &cfg, "--out", &ws.arg("c"), "--guidance", &guidance, "--resume", &resume]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let summary: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(summary["start_step"], 5);
    assert_eq!(summary["final_step"], 10);
    assert_eq!(a, std::fs::read(ws.path("c/final.dhck")).unwrap());

    let out = avatar(&["optimize", "--config", &cfg, "--out", &ws.arg("d"), "--guidance", &guidance, "--seed", "5"]);
    assert_eq!(code(&out), 0);
    assert_ne!(a, std::fs::read(ws.path("d/final.dhck")).unwrap());
}

#[test]
fn config_and_guidance_errors_have_stable_codes() {
    let ws = Workspace::new();
    let guidance = ws.dataset();
    std::fs::write(ws.path("noprompt.toml"), CONFIG.replace("prompt = \"a person\"", "")).unwrap();
    let out = avatar(&["optimize", "--config", &ws.arg("noprompt.toml"), "--out", &ws.arg("x"), "--guidance", &guidance]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("prompt"), "{}", stderr(&out));

    std::fs::write(ws.path("bad.toml"), "iterations = \"many\"").unwrap();
    let out = avatar(&["optimize", "--config", &ws.arg("bad.toml"), "--out", &ws.arg("x"), "--guidance", &guidance]);
    assert_eq!(code(&out), 2);

    let out = avatar(&["optimize", "--config", &ws.arg("cfg.toml"), "--out", &ws.arg("x"), "--guidance", "builtin:nothing:x"]);
    assert_eq!(code(&out), 2);

    let out = avatar(&["--json", "optimize", "--config", &ws.arg("cfg.toml"), "--out", &ws.arg("x"), "--guidance", "remote:127.0.0.1:1"]);
    assert_eq!(code(&out), 3, "{}", stderr(&out));
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["exit_code"], 3);

    let out = avatar(&["render", "--checkpoint", &ws.arg("cfg.toml"), "--out", &ws.arg("x.png")]);
    assert_eq!(code(&out), 4);
    let out = avatar(&["optimize", "--config", &ws.arg("cfg.toml"), "--out", &ws.arg("x"), "--guidance", &guidance, "--resume", &ws.arg("cfg.toml")]);
    assert_eq!(code(&out), 4);
}

#[test]
fn fresh_mask_matches_the_sdf_silhouette() {
    let ws = Workspace::new();
    let ckpt = ws.fresh_checkpoint();
    let sk = SkeletonConfig::default();
    let state = Checkpoint::load(Path::new(&ckpt)).unwrap().state;
    let mut pose = Pose::rest(16);
    pose.joint_rotations[7] = Vec3::new(0.0, 0.0, -0.8);
    pose.joint_rotations[13] = Vec3::new(-0.4, 0.0, 0.0);
    let triplets: Vec<[f64; 3]> = pose.joint_rotations.iter().map(|w| w.to_f64()).collect();
    std::fs::write(ws.path("pose.json"), serde_json::to_string(&triplets).unwrap()).unwrap();
    for cam in ["0.3,0.1,2.6,40", "2.0,-0.2,2.2,36"] {
        let out = avatar(&[
            "render", "--checkpoint", &ckpt, "--pose", &ws.arg("pose.json"), "--camera", cam, "--mode", "mask",
            "--resolution", "48", "--out", &ws.arg("mask.png"),
        ]);
        assert_eq!(code(&out), 0, "{}", stderr(&out));
        let mask = Image::<f32>::read_pfm(&ws.path("mask.pfm")).unwrap();
        let camera = cam.parse::<CameraSpec>().unwrap().camera(&sk, &state.shape, 48).unwrap();
        let body = PosedBody::new(&sk, &pose, &state.shape.cast()).unwrap();
        let rendered: Vec<bool> = mask.data.iter().map(|&m| m >= 0.5).collect();
        let oracle: Vec<bool> = (0..camera.pixel_count()).map(|p| common::sdf_hit(&body, &camera.pixel_ray(p))).collect();
        let iou = common::iou(&rendered, &oracle);
        assert!(iou >= 0.95, "camera {cam}: IoU {iou}");
    }
}

#[test]
fn renders_are_byte_identical_and_normals_are_encoded() {
    let ws = Workspace::new();
    let ckpt = ws.fresh_checkpoint();
    let render = |mode: &str, name: &str| {
        let out = avatar(&["render", "--checkpoint", &ckpt, "--mode", mode, "--resolution", "24", "--out", &ws.arg(name)]);
        assert_eq!(code(&out), 0, "{}", stderr(&out));
        std::fs::read(ws.path(name)).unwrap()
    };
    assert_eq!(render("shaded", "a.png"), render("shaded", "b.png"));
    render("normals", "n.png");
    let normals = Image::<f32>::read_pfm(&ws.path("n.pfm")).unwrap();
    assert!(normals.data.iter().all(|v| (0.0..=1.0).contains(v)));
    assert!(normals.data.iter().any(|&v| (v - 0.5).abs() > 0.1));
    let out = avatar(&["render", "--checkpoint", &ckpt, "--mode", "depth", "--out", &ws.arg("z.png")]);
    assert_eq!(code(&out), 2);
    let out = avatar(&["render", "--checkpoint", &ckpt, "--camera", "1,2,3", "--out", &ws.arg("z.png")]);
    assert_eq!(code(&out), 2);
}

#[test]
fn animate_matches_render_and_reports_bad_lines() {
    let ws = Workspace::new();
    let ckpt = ws.fresh_checkpoint();
    let mut pose = Pose::rest(16);
    pose.joint_rotations[4] = Vec3::new(0.0, 0.0, 0.7);
    let one = PoseSequence { fps: 30.0, frames: vec![pose.clone()] };
    std::fs::write(ws.path("one.json"), one.to_json()).unwrap();
    let triplets: Vec<[f64; 3]> = pose.joint_rotations.iter().map(|w| w.to_f64()).collect();
    std::fs::write(ws.path("pose.json"), serde_json::to_string(&triplets).unwrap()).unwrap();
    let view = ["--checkpoint", &ckpt, "--resolution", "20", "--camera", "0.4,0.0,2.6,18"];

    let out = avatar(&[&["animate", "--pose", &ws.arg("one.json"), "--out", &ws.arg("anim")][..], &view].concat());
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let out = avatar(&[&["render", "--pose", &ws.arg("pose.json"), "--out", &ws.arg("still.png")][..], &view].concat());
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert_eq!(std::fs::read(ws.path("anim/frame_000001.png")).unwrap(), std::fs::read(ws.path("still.png")).unwrap());

    let many = PoseSequence { fps: 30.0, frames: vec![pose; 5] };
    std::fs::write(ws.path("many.json"), many.to_json()).unwrap();
    let out = avatar(&[&["--json", "animate", "--pose", &ws.arg("many.json"), "--out", &ws.arg("many")][..], &view].concat());
    assert_eq!(code(&out), 0);
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["frames"], 5);
    let n = std::fs::read_dir(ws.path("many")).unwrap().count();
    assert_eq!(n, 5);
    assert!(ws.path("many/frame_000005.png").exists());

    let text = many.to_json();
    let broken: Vec<String> = text
        .lines()
        .enumerate()
        .map(|(i, l)| if i == 5 { "    [[0.0, 0.0, 0.0]],".to_string() } else { l.to_string() })
        .collect();
    std::fs::write(ws.path("broken.json"), broken.join("\n")).unwrap();
    let out = avatar(&[&["animate", "--pose", &ws.arg("broken.json"), "--out", &ws.arg("x")][..], &view].concat());
    assert_eq!(code(&out), 5);
    assert!(stderr(&out).contains("line 6"), "{}", stderr(&out));
    let out = avatar(&[&["animate", "--pose", &ws.arg("absent.json"), "--out", &ws.arg("x")][..], &view].concat());
    assert_eq!(code(&out), 5);
}

#[test]
fn mesh_export_writes_obj_or_reports_an_empty_surface() {
    let ws = Workspace::new();
    let ckpt = ws.fresh_checkpoint();
    let out = avatar(&["--json", "export-mesh", "--checkpoint", &ckpt, "--resolution", "32", "--out", &ws.arg("m.obj")]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    let obj = std::fs::read_to_string(ws.path("m.obj")).unwrap();
    let verts = obj.lines().filter(|l| l.starts_with("v ")).count();
    let faces = obj.lines().filter(|l| l.starts_with("f ")).count();
    assert_eq!(v["vertices"], verts);
    assert_eq!(v["faces"], faces);
    assert!(faces > 100);

    let out = avatar(&["export-mesh", "--checkpoint", &ckpt, "--resolution", "8", "--out", &ws.arg("m.obj")]);
    assert_eq!(code(&out), 2);

    let mut state = Checkpoint::load(Path::new(&ckpt)).unwrap().state;
    let layout = state.params.layout().clone();
    state.params.values[layout.density.weights()].iter_mut().for_each(|w| *w = 0.0);
    state.params.values[layout.density.bias()][0] = 5000.0;
    Checkpoint::new(state, &SkeletonConfig::default(), None).save(&ws.path("solid.dhck")).unwrap();
    let out = avatar(&["export-mesh", "--checkpoint", &ws.arg("solid.dhck"), "--resolution", "32", "--out", &ws.arg("s.obj")]);
    assert_eq!(code(&out), 6, "{}", stderr(&out));
}

#[test]
fn gradient_check_passes_and_fails_loudly() {
    let out = avatar(&["--json", "check-grads", "--seed", "2"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["passed"], true);
    let names: Vec<&str> = v["report"]["components"].as_array().unwrap().iter().map(|c| c["name"].as_str().unwrap()).collect();
    for group in ["field.conditioning", "field.trunk.0", "field.density_head", "field.proposal_out", "render.lighting", "loss.mask"] {
        assert!(names.contains(&group), "missing {group}");
    }
    let out = avatar(&["check-grads"]);
    assert_eq!(code(&out), 0);
    assert!(String::from_utf8_lossy(&out.stdout).contains("all components within tolerance"));

    let out = avatar(&["check-grads", "--tolerance", "1e-14"]);
    assert_eq!(code(&out), 7);
    assert!(stderr(&out).contains("FAIL"));
}
