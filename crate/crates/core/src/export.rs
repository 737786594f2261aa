//! Artifacts derived from a trained state: posed renders, animation frames and meshes.

use std::cell::Cell;
use std::collections::HashMap;
use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rayon::prelude::*;
use serde::de::{self, DeserializeSeed, MapAccess, SeqAccess, Visitor};
use thiserror::Error;

use crate::body::{density_proxy, BodyError, Pose, PosedBody, Region, Shape, SkeletonConfig};
use crate::field::{composite_density, FieldError, FieldParams};
use crate::math::Vec3;
use crate::render::{Camera, Image, RenderError, RenderMode, RenderSettings};
use crate::scalar::Scalar;
use crate::trainer::{render_state, TrainError, TrainState};

pub const MIN_MESH_RESOLUTION: usize = 32;
pub const MAX_MESH_RESOLUTION: usize = 512;

#[derive(Debug, Error)]
pub enum ExportError {
    #[error("pose sequence, line {line}: {message}")]
    Sequence { line: usize, message: String },
    #[error("invalid pose: {0}")]
    Pose(String),
    #[error("invalid camera spec {0:?} (expected \"az,el,r,focal\")")]
    CameraSpec(String),
    #[error("mesh resolution {0} outside [{MIN_MESH_RESOLUTION}, {MAX_MESH_RESOLUTION}]")]
    Resolution(usize),
    #[error("no surface at the iso level")]
    EmptySurface,
    #[error(transparent)]
    Body(#[from] BodyError),
    #[error(transparent)]
    Field(#[from] FieldError),
    #[error(transparent)]
    Render(#[from] RenderError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = ExportError> = std::result::Result<T, E>;

// ---- poses ----

/// A motion: one pose per frame at a fixed rate.
#[derive(Clone, Debug, PartialEq)]
pub struct PoseSequence {
    pub fps: f64,
    pub frames: Vec<Pose<f64>>,
}

impl PoseSequence {
    /// Parses `{"fps": f, "frames": [[[x, y, z], ...], ...]}`.
    pub fn parse(text: &str, joints: usize) -> Result<Self> {
        let failed = Cell::new(None);
        let mut de = serde_json::Deserializer::from_str(text);
        SequenceSeed { joints, failed: &failed }
            .deserialize(&mut de)
            .and_then(|s| de.end().map(|_| s))
            .map_err(|e| {
                // Validation errors surface after the reader has moved on; locate the item instead.
                let line = failed.get().and_then(|item| locate(text, item)).unwrap_or(e.line()).max(1);
                ExportError::Sequence { line, message: strip_position(&e) }
            })
    }

    pub fn load(path: &Path, joints: usize) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?, joints)
    }

    pub fn to_json(&self) -> String {
        let mut out = String::from("{\n  \"fps\": ");
        out.push_str(&serde_json::to_string(&self.fps).expect("number serializes"));
        out.push_str(",\n  \"frames\": [\n");
        for (i, f) in self.frames.iter().enumerate() {
            let triplets: Vec<[f64; 3]> = f.joint_rotations.iter().map(|w| w.to_f64()).collect();
            out.push_str("    ");
            out.push_str(&serde_json::to_string(&triplets).expect("numbers serialize"));
            out.push_str(if i + 1 < self.frames.len() { ",\n" } else { "\n" });
        }
        out.push_str("  ]\n}\n");
        out
    }
}

fn strip_position(e: &serde_json::Error) -> String {
    let s = e.to_string();
    match s.rfind(" at line ") {
        Some(i) => s[..i].to_string(),
        None => s,
    }
}

/// Item whose validation failed.
#[derive(Clone, Copy, Debug)]
enum Item {
    Fps,
    Frames,
    Frame(usize),
}

/// Line of `item` in a syntactically valid prefix of `text`.
fn locate(text: &str, item: Item) -> Option<usize> {
    let bytes = text.as_bytes();
    let mut depth = 0usize;
    let mut in_string = false;
    let mut escaped = false;
    let mut string_start = 0;
    let mut last_key: Option<&str> = None;
    let mut in_frames = false;
    let mut frame = 0usize;
    let mut expect_element = false;
    let line_at = |pos: usize| text[..pos].matches('\n').count() + 1;
    for (i, &b) in bytes.iter().enumerate() {
        if in_string {
            match b {
                _ if escaped => escaped = false,
                b'\\' => escaped = true,
                b'"' => {
                    in_string = false;
                    if depth == 1 {
                        last_key = Some(&text[string_start + 1..i]);
                    }
                }
                _ => {}
            }
            continue;
        }
        if b.is_ascii_whitespace() {
            continue;
        }
        if expect_element && depth == 2 && b != b']' {
            expect_element = false;
            frame += 1;
            if let Item::Frame(k) = item {
                if k == frame {
                    return Some(line_at(i));
                }
            }
        }
        match b {
            b'"' => {
                in_string = true;
                string_start = i;
            }
            b':' if depth == 1 => match (item, last_key) {
                (Item::Fps, Some("fps")) | (Item::Frames, Some("frames")) => return Some(line_at(i)),
                _ => {}
            },
            b'{' | b'[' => {
                depth += 1;
                if depth == 2 && b == b'[' && last_key == Some("frames") {
                    in_frames = true;
                    expect_element = true;
                }
            }
            b'}' | b']' => {
                if depth == 2 && in_frames {
                    in_frames = false;
                }
                depth = depth.saturating_sub(1);
            }
            b',' if depth == 2 && in_frames => expect_element = true,
            _ => {}
        }
    }
    None
}

struct SequenceSeed<'a> {
    joints: usize,
    failed: &'a Cell<Option<Item>>,
}

impl<'de> DeserializeSeed<'de> for SequenceSeed<'_> {
    type Value = PoseSequence;

    fn deserialize<D: de::Deserializer<'de>>(self, d: D) -> std::result::Result<Self::Value, D::Error> {
        d.deserialize_map(self)
    }
}

impl<'de> Visitor<'de> for SequenceSeed<'_> {
    type Value = PoseSequence;

    fn expecting(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("an object with \"fps\" and \"frames\"")
    }

    fn visit_map<A: MapAccess<'de>>(self, mut map: A) -> std::result::Result<Self::Value, A::Error> {
        let mut fps = None;
        let mut frames = None;
        while let Some(key) = map.next_key::<String>()? {
            match key.as_str() {
                "fps" => {
                    if fps.is_some() {
                        return Err(de::Error::duplicate_field("fps"));
                    }
                    let v: f64 = map.next_value()?;
                    if !(v > 0.0 && v.is_finite()) {
                        self.failed.set(Some(Item::Fps));
                        return Err(de::Error::custom(format!("frame rate must be > 0, got {v}")));
                    }
                    fps = Some(v);
                }
                "frames" => {
                    if frames.is_some() {
                        return Err(de::Error::duplicate_field("frames"));
                    }
                    frames = Some(map.next_value_seed(FramesSeed { joints: self.joints, failed: self.failed })?);
                }
                other => return Err(de::Error::unknown_field(other, &["fps", "frames"])),
            }
        }
        let fps = fps.ok_or_else(|| de::Error::missing_field("fps"))?;
        let frames = frames.ok_or_else(|| de::Error::missing_field("frames"))?;
        Ok(PoseSequence { fps, frames })
    }
}

struct FramesSeed<'a> {
    joints: usize,
    failed: &'a Cell<Option<Item>>,
}

impl<'de> DeserializeSeed<'de> for FramesSeed<'_> {
    type Value = Vec<Pose<f64>>;

    fn deserialize<D: de::Deserializer<'de>>(self, d: D) -> std::result::Result<Self::Value, D::Error> {
        d.deserialize_seq(self)
    }
}

impl<'de> Visitor<'de> for FramesSeed<'_> {
    type Value = Vec<Pose<f64>>;

    fn expecting(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("a list of frames")
    }

    fn visit_seq<A: SeqAccess<'de>>(self, mut seq: A) -> std::result::Result<Self::Value, A::Error> {
        let mut frames = Vec::new();
        while let Some(triplets) = seq.next_element::<Vec<[f64; 3]>>()? {
            let pose = Pose {
                joint_rotations: triplets.into_iter().map(Vec3::from_f64).collect(),
                root_translation: Vec3::zero(),
            };
            if let Err(e) = pose.validate(self.joints) {
                self.failed.set(Some(Item::Frame(frames.len() + 1)));
                return Err(de::Error::custom(format!("frame {}: {e}", frames.len() + 1)));
            }
            frames.push(pose);
        }
        if frames.is_empty() {
            self.failed.set(Some(Item::Frames));
            return Err(de::Error::custom("sequence has no frames"));
        }
        Ok(frames)
    }
}

/// `rest`, or a JSON file holding one list of axis-angle triplets.
pub fn load_pose(spec: &str, joints: usize) -> Result<Pose<f64>> {
    if spec == "rest" {
        return Ok(Pose::rest(joints));
    }
    let text = std::fs::read_to_string(spec)?;
    let triplets: Vec<[f64; 3]> = serde_json::from_str(&text).map_err(|e| ExportError::Pose(format!("{spec}: {e}")))?;
    let pose = Pose {
        joint_rotations: triplets.into_iter().map(Vec3::from_f64).collect(),
        root_translation: Vec3::zero(),
    };
    pose.validate(joints).map_err(|e| ExportError::Pose(format!("{spec}: {e}")))?;
    Ok(pose)
}

// ---- cameras ----

/// Orbit camera `azimuth,elevation,radius,focal`: angles in radians, radius in
/// meters, focal length in pixels.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CameraSpec {
    pub azimuth: f64,
    pub elevation: f64,
    pub radius: f64,
    pub focal: f64,
}

impl Default for CameraSpec {
    fn default() -> Self {
        Self {
            azimuth: 0.0,
            elevation: 0.0,
            radius: 2.6,
            focal: 60.0,
        }
    }
}

impl FromStr for CameraSpec {
    type Err = ExportError;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || ExportError::CameraSpec(s.to_string());
        let v: Vec<f64> = s.split(',').map(|p| p.trim().parse::<f64>()).collect::<std::result::Result<_, _>>().map_err(|_| bad())?;
        let [azimuth, elevation, radius, focal] = v[..] else { return Err(bad()) };
        if !v.iter().all(|x| x.is_finite()) || radius <= 0.0 || focal <= 0.0 {
            return Err(bad());
        }
        Ok(Self { azimuth, elevation, radius, focal })
    }
}

impl CameraSpec {
    /// Aims at the center of the rest-pose body, so every frame of a motion shares the camera.
    pub fn camera(&self, skeleton: &SkeletonConfig, shape: &Shape<f32>, resolution: usize) -> Result<Camera<f64>> {
        let body = PosedBody::new(skeleton, &Pose::rest(skeleton.joint_count()), &shape.cast::<f64>())?;
        let camera = Camera {
            azimuth: self.azimuth,
            elevation: self.elevation,
            radius: self.radius,
            look_at: body.region_bounds(Region::FullBody).center(),
            focal: self.focal,
            width: resolution,
            height: resolution,
        };
        camera.validate()?;
        Ok(camera)
    }
}

// ---- rendering ----

/// Renders `state` in `pose` and returns the image for `mode`.
pub fn render_frame(
    state: &TrainState,
    skeleton: &SkeletonConfig,
    pose: &Pose<f64>,
    camera: &Camera<f64>,
    settings: &RenderSettings,
    mode: RenderMode,
) -> Result<Image<f32>> {
    let density_normals = mode == RenderMode::Normals;
    let out = render_state(state, skeleton, pose, camera, settings, mode, density_normals)?;
    Ok(out.image(mode))
}

pub fn frame_name(index: usize) -> String {
    format!("frame_{:06}.png", index + 1)
}

/// Renders every frame of `sequence` into `dir` without touching the state.
pub fn animate(
    state: &TrainState,
    skeleton: &SkeletonConfig,
    sequence: &PoseSequence,
    camera: &Camera<f64>,
    settings: &RenderSettings,
    mode: RenderMode,
    dir: &Path,
) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;
    let mut paths = Vec::with_capacity(sequence.frames.len());
    for (i, pose) in sequence.frames.iter().enumerate() {
        let img = render_frame(state, skeleton, pose, camera, settings, mode)?;
        let path = dir.join(frame_name(i));
        img.write_png(&path)?;
        paths.push(path);
    }
    Ok(paths)
}

// ---- meshes ----

/// Triangle mesh with per-vertex albedo.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MeshArtifact {
    pub vertices: Vec<[f64; 3]>,
    pub triangles: Vec<[usize; 3]>,
    pub colors: Vec<[f64; 3]>,
}

impl MeshArtifact {
    pub fn validate(&self) -> Result<(), String> {
        if self.colors.len() != self.vertices.len() {
            return Err(format!("{} colors for {} vertices", self.colors.len(), self.vertices.len()));
        }
        if self.vertices.iter().flatten().any(|v| !v.is_finite()) {
            return Err("non-finite vertex".into());
        }
        if let Some(t) = self.triangles.iter().find(|t| t.iter().any(|&i| i >= self.vertices.len())) {
            return Err(format!("triangle {t:?} indexes past {} vertices", self.vertices.len()));
        }
        Ok(())
    }

    /// Wavefront OBJ with `v x y z r g b` vertex colors.
    pub fn write_obj<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "# {} vertices, {} faces", self.vertices.len(), self.triangles.len())?;
        for (v, c) in self.vertices.iter().zip(&self.colors) {
            writeln!(w, "v {} {} {} {} {} {}", v[0], v[1], v[2], c[0], c[1], c[2])?;
        }
        for t in &self.triangles {
            writeln!(w, "f {} {} {}", t[0] + 1, t[1] + 1, t[2] + 1)?;
        }
        w.flush()
    }

    pub fn save_obj(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path)?;
        self.write_obj(std::io::BufWriter::new(f))?;
        Ok(())
    }
}

/// Sampling lattice over the padded body box.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Grid {
    pub origin: Vec3<f64>,
    pub spacing: f64,
    pub dims: (usize, usize, usize),
}

impl Grid {
    /// `resolution` cells along the longest axis of the body box.
    pub fn around<T: Scalar>(body: &PosedBody<T>, resolution: usize) -> Self {
        let b = body.region_bounds(Region::FullBody);
        let (min, max) = (b.min.cast::<f64>(), b.max.cast::<f64>());
        let ext = max - min;
        let spacing = ext.x.max(ext.y).max(ext.z) / resolution as f64;
        let pad = 2.0 * spacing;
        let cells = |e: f64| ((e + 2.0 * pad) / spacing).ceil() as usize + 1;
        Self {
            origin: min - Vec3::splat(pad),
            spacing,
            dims: (cells(ext.x), cells(ext.y), cells(ext.z)),
        }
    }

    pub fn point(&self, i: usize, j: usize, k: usize) -> Vec3<f64> {
        self.origin + Vec3::new(i as f64, j as f64, k as f64) * self.spacing
    }

    pub fn voxel_diagonal(&self) -> f64 {
        self.spacing * 3f64.sqrt()
    }
}

/// Extracts the `a / 2` level set of the final density `max(tau_raw, tau_proxy)`.
pub fn extract_mesh<T: Scalar>(
    params: &FieldParams<T>,
    skeleton: &SkeletonConfig,
    pose: &Pose<T>,
    shape: &Shape<T>,
    resolution: usize,
) -> Result<MeshArtifact> {
    if !(MIN_MESH_RESOLUTION..=MAX_MESH_RESOLUTION).contains(&resolution) {
        return Err(ExportError::Resolution(resolution));
    }
    let body = PosedBody::new(skeleton, pose, shape)?;
    let ev = params.evaluator(pose, shape)?;
    let a = body.sharpness();
    let grid = Grid::around(&body, resolution);
    let (nx, ny, nz) = grid.dims;
    let values: Vec<f32> = (0..nz)
        .into_par_iter()
        .flat_map_iter(|k| {
            let (body, ev) = (&body, &ev);
            (0..ny).flat_map(move |j| {
                (0..nx).map(move |i| {
                    let x = grid.point(i, j, k).cast::<T>();
                    let c = body.evaluate(x);
                    composite_density(ev.density(&c), density_proxy(c.d, a)).to_f64_lossy() as f32
                })
            })
        })
        .collect();
    let iso = (a.to_f64_lossy() * 0.5) as f32;
    let s = grid.spacing as f32;
    let o = grid.origin;
    let mc = mcubes::MarchingCubes::new(
        grid.dims,
        (s, s, s),
        (1.0, 1.0, 1.0),
        lin_alg::f32::Vec3::new(o.x as f32, o.y as f32, o.z as f32),
        values,
        iso,
    )?;
    let raw = mc.generate(mcubes::MeshSide::OutsideOnly);

    let mut index: HashMap<[u32; 3], usize> = HashMap::new();
    let mut vertices = Vec::new();
    let mut remap = Vec::with_capacity(raw.vertices.len());
    for v in &raw.vertices {
        let key = [v.posit.x.to_bits(), v.posit.y.to_bits(), v.posit.z.to_bits()];
        let id = *index.entry(key).or_insert_with(|| {
            vertices.push([v.posit.x as f64, v.posit.y as f64, v.posit.z as f64]);
            vertices.len() - 1
        });
        remap.push(id);
    }
    let triangles: Vec<[usize; 3]> = raw
        .indices
        .chunks_exact(3)
        .map(|t| [remap[t[0]], remap[t[1]], remap[t[2]]])
        .filter(|t| t[0] != t[1] && t[1] != t[2] && t[0] != t[2])
        .collect();
    if triangles.is_empty() {
        return Err(ExportError::EmptySurface);
    }
    let colors = vertices
        .par_iter()
        .map(|v| {
            let c = body.evaluate(Vec3::from_f64(*v));
            ev.eval(&c).albedo.cast::<f64>().to_f64()
        })
        .collect();
    let mesh = MeshArtifact { vertices, triangles, colors };
    debug_assert!(mesh.validate().is_ok());
    Ok(mesh)
}
