//! Articulated semantic signed-distance body built from blended capsules.
//!
//! A [`PosedBody`] is constructed once per pose and shape and then answers
//! per-point queries: the smooth-union signed distance `d`, the canonical
//! surface code `s` (nearest surface point mapped back to the rest pose and
//! mean shape through its bone), region boxes and surface samples.

mod model;
mod pose;
mod skeleton;

pub use model::{
    density_proxy, density_proxy_derivative, PosedBody, SdfGradient, SemanticCoord, MAX_BONES,
};
pub use pose::{Pose, Shape, SHAPE_DIM, SHAPE_MAX, SHAPE_MIN, WIDTH_INDEX};
pub use skeleton::{BoneSpec, Region, ShapeGroup, SkeletonConfig};

#[derive(Debug, thiserror::Error)]
pub enum BodyError {
    #[error("invalid skeleton: {0}")]
    InvalidSkeleton(String),
    #[error("invalid pose: {0}")]
    InvalidPose(String),
    #[error("invalid shape: {0}")]
    InvalidShape(String),
    #[error("surface projection did not converge for seed {seed_index}")]
    SurfaceProjection { seed_index: usize },
}
