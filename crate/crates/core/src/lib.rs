pub mod body;
pub mod export;
pub mod field;
pub mod gradcheck;
pub mod guidance;
pub mod losses;
pub mod math;
pub mod procedural;
pub mod render;
pub mod scalar;
pub mod trainer;

/// Single-precision instantiations used by the trainer and the command line.
pub type Vec3f = math::Vec3<f32>;
pub type Posef = body::Pose<f32>;
pub type Shapef = body::Shape<f32>;
pub type PosedBodyf = body::PosedBody<f32>;
pub type FieldParamsf = field::FieldParams<f32>;
pub type Cameraf = render::Camera<f32>;
pub type Imagef = render::Image<f32>;
pub type ShLightingf = render::ShLighting<f32>;
pub type RenderOutputf = render::RenderOutput<f32>;
