use avatar_core::body::{Pose, PosedBody, Shape, SkeletonConfig};
use avatar_core::export::*;
use avatar_core::field::{FieldArch, FieldParams};
use avatar_core::math::Vec3;
use avatar_core::render::{RenderMode, RenderSettings};
use avatar_core::trainer::{TrainConfig, TrainState};

fn small_arch() -> FieldArch {
    FieldArch {
        width: 16,
        layers: 2,
        bands: 3,
        proposal_width: 8,
        proposal_layers: 1,
        ..FieldArch::default()
    }
}

fn small_state() -> TrainState {
    let mut cfg = TrainConfig::default();
    cfg.field = small_arch();
    cfg.seed = 11;
    TrainState::init(&cfg).unwrap()
}

fn sequence_text(frames: &[Vec<[f64; 3]>]) -> String {
    PoseSequence {
        fps: 30.0,
        frames: frames
            .iter()
            .map(|f| Pose { joint_rotations: f.iter().map(|&v| Vec3::from_f64(v)).collect(), root_translation: Vec3::zero() })
            .collect(),
    }
    .to_json()
}

#[test]
fn sequence_round_trips() {
    let mut frames = vec![vec![[0.0; 3]; 16]; 3];
    frames[1][4] = [0.1, -0.2, 0.3];
    frames[2][7] = [0.0, 1.25, 0.0];
    let text = sequence_text(&frames);
    let seq = PoseSequence::parse(&text, 16).unwrap();
    assert_eq!(seq.fps, 30.0);
    assert_eq!(seq.frames.len(), 3);
    assert_eq!(seq.frames[1].joint_rotations[4], Vec3::new(0.1, -0.2, 0.3));
    assert_eq!(PoseSequence::parse(&seq.to_json(), 16).unwrap(), seq);
}

fn line_of(text: &str) -> usize {
    match PoseSequence::parse(text, 16) {
        Err(ExportError::Sequence { line, .. }) => line,
        other => panic!("expected a sequence error, got {other:?}"),
    }
}

#[test]
fn malformed_sequences_report_their_line() {
    let frames = vec![vec![[0.0; 3]; 16]; 4];
    let good = sequence_text(&frames);
    let lines: Vec<&str> = good.lines().collect();
    // frames start on line 4
    assert!(lines[3].starts_with("    [["));

    let mut short = lines.clone();
    let third = "    [[0.0,0.0,0.0]],";
    short[5] = third;
    assert_eq!(line_of(&short.join("\n")), 6);

    let mut nan = lines.clone();
    let bad = lines[4].replacen("0.0", "\"x\"", 1);
    nan[4] = &bad;
    assert_eq!(line_of(&nan.join("\n")), 5);

    let zero_fps = good.replace("\"fps\": 30.0", "\"fps\": 0.0");
    assert_eq!(line_of(&zero_fps), 2);

    assert_eq!(line_of("{\n  \"fps\": 30,\n  \"frames\": []\n}"), 3);
    assert_eq!(line_of("{\n  \"fps\": 30\n}"), 3);
    assert_eq!(line_of("{\n  \"fps\": 30,\n  \"frames\": [\n"), 4);
    assert_eq!(line_of("{\"fps\": 30, \"frames\": [[]], \"extra\": 1}"), 1);
}

#[test]
fn camera_specs_parse() {
    let c: CameraSpec = "0.5, 0.1,2.5,40".parse().unwrap();
    assert_eq!(c, CameraSpec { azimuth: 0.5, elevation: 0.1, radius: 2.5, focal: 40.0 });
    for bad in ["", "1,2,3", "1,2,3,4,5", "a,0,2,40", "0,0,-1,40", "0,0,2,0", "0,0,inf,40"] {
        assert!(bad.parse::<CameraSpec>().is_err(), "{bad:?} accepted");
    }
}

#[test]
fn one_frame_animation_equals_render() {
    let state = small_state();
    let sk = SkeletonConfig::default();
    let mut pose = Pose::rest(16);
    pose.joint_rotations[4] = Vec3::new(0.0, 0.0, 0.6);
    let settings = RenderSettings { n_coarse: 16, n_fine: 8, ..RenderSettings::default() };
    let cam = CameraSpec { azimuth: 0.3, elevation: 0.1, radius: 2.6, focal: 16.0 }.camera(&sk, &state.shape, 20).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let seq = PoseSequence { fps: 24.0, frames: vec![pose.clone()] };
    let frames = animate(&state, &sk, &seq, &cam, &settings, RenderMode::Shaded, dir.path()).unwrap();
    assert_eq!(frames.len(), 1);
    assert!(frames[0].ends_with("frame_000001.png"));
    let direct = dir.path().join("direct.png");
    render_frame(&state, &sk, &pose, &cam, &settings, RenderMode::Shaded).unwrap().write_png(&direct).unwrap();
    assert_eq!(std::fs::read(&frames[0]).unwrap(), std::fs::read(&direct).unwrap());

    let seq = PoseSequence { fps: 24.0, frames: vec![Pose::rest(16); 3] };
    let frames = animate(&state, &sk, &seq, &cam, &settings, RenderMode::Mask, &dir.path().join("m")).unwrap();
    assert_eq!(frames.len(), 3);
    assert!(frames[2].ends_with("frame_000003.png"));
}

fn fresh_mesh(resolution: usize) -> (PosedBody<f64>, MeshArtifact, f64) {
    let sk = SkeletonConfig::default();
    let params = FieldParams::<f64>::init(3, &small_arch()).unwrap();
    let mut pose = Pose::rest(16);
    pose.joint_rotations[11] = Vec3::new(0.5, 0.0, 0.0);
    let body = PosedBody::new(&sk, &pose, &Shape::mean()).unwrap();
    let mesh = extract_mesh(&params, &sk, &pose, &Shape::mean(), resolution).unwrap();
    let diag = Grid::around(&body, resolution).voxel_diagonal();
    (body, mesh, diag)
}

fn hausdorff(body: &PosedBody<f64>, mesh: &MeshArtifact, surface: &[Vec3<f64>]) -> f64 {
    let to_surface = mesh.vertices.iter().map(|v| body.distance(Vec3::from_f64(*v)).abs()).fold(0.0, f64::max);
    let to_mesh = surface
        .iter()
        .map(|p| {
            mesh.vertices
                .iter()
                .map(|v| (Vec3::from_f64(*v) - *p).norm_squared())
                .fold(f64::INFINITY, f64::min)
                .sqrt()
        })
        .fold(0.0, f64::max);
    to_surface.max(to_mesh)
}

#[test]
fn fresh_mesh_lies_on_the_body_surface() {
    let (body, mesh, diag) = fresh_mesh(48);
    mesh.validate().unwrap();
    assert!(mesh.triangles.len() > 1000);
    for v in &mesh.vertices {
        let d = body.distance(Vec3::from_f64(*v));
        assert!(d.abs() <= 2.0 * diag, "vertex {v:?} at distance {d}, diagonal {diag}");
    }
    assert!(mesh.colors.iter().flatten().all(|c| (0.0..=1.0).contains(c)));
}

#[test]
fn finer_grids_approach_the_surface() {
    let (body, coarse, _) = fresh_mesh(32);
    let (_, fine, _) = fresh_mesh(64);
    let surface = body.sample_surface_points(600, 2).unwrap();
    let hc = hausdorff(&body, &coarse, &surface);
    let hf = hausdorff(&body, &fine, &surface);
    assert!(hf < hc, "hausdorff 64: {hf}, 32: {hc}");
}

#[test]
fn obj_parses_in_a_reference_loader() {
    let (_, mesh, _) = fresh_mesh(32);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("mesh.obj");
    mesh.save_obj(&path).unwrap();
    let (models, _) = tobj::load_obj(&path, &tobj::LoadOptions { triangulate: true, ..Default::default() }).unwrap();
    assert_eq!(models.len(), 1);
    let m = &models[0].mesh;
    assert_eq!(m.positions.len(), 3 * mesh.vertices.len());
    assert_eq!(m.indices.len(), 3 * mesh.triangles.len());
    assert_eq!(m.vertex_color.len(), 3 * mesh.vertices.len());
    for (i, v) in mesh.vertices.iter().enumerate().step_by(97) {
        for k in 0..3 {
            assert!((m.positions[3 * i + k] as f64 - v[k]).abs() < 1e-6);
        }
    }
}

#[test]
fn resolution_bounds_and_empty_surface() {
    let sk = SkeletonConfig::default();
    let mut params = FieldParams::<f64>::init(3, &small_arch()).unwrap();
    let pose = Pose::rest(16);
    for r in [16, 31, 513] {
        assert!(matches!(extract_mesh(&params, &sk, &pose, &Shape::mean(), r), Err(ExportError::Resolution(_))));
    }
    // density above the iso level everywhere leaves no crossing
    let layout = params.layout().clone();
    params.values[layout.density.weights()].iter_mut().for_each(|w| *w = 0.0);
    params.values[layout.density.bias()][0] = 5000.0;
    assert!(matches!(extract_mesh(&params, &sk, &pose, &Shape::mean(), 32), Err(ExportError::EmptySurface)));
}
