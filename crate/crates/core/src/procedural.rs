//! Ground-truth avatar: the bare capsule body painted with one albedo per region.

use crate::body::{Pose, PosedBody, Region, SemanticCoord, Shape, SkeletonConfig};
use crate::field::FieldOutput;
use crate::math::Vec3;
use crate::render::RadianceSource;
use crate::scalar::Scalar;

/// Default colors, indexed like [`Region::PARTS`].
pub const DEFAULT_PALETTE: [[f64; 3]; 6] = [
    [0.86, 0.66, 0.52],
    [0.72, 0.16, 0.14],
    [0.16, 0.22, 0.48],
    [0.92, 0.82, 0.30],
    [0.20, 0.62, 0.30],
    [0.55, 0.25, 0.65],
];

#[derive(Clone, Debug)]
pub struct ProceduralAvatar<T> {
    albedo: Vec<Vec3<T>>,
    /// Canonical capsule per bone.
    capsules: Vec<(Vec3<T>, Vec3<T>, T)>,
}

impl<T: Scalar> ProceduralAvatar<T> {
    pub fn new(cfg: &SkeletonConfig) -> Self {
        Self::with_palette(cfg, &DEFAULT_PALETTE)
    }

    pub fn with_palette(cfg: &SkeletonConfig, palette: &[[f64; 3]; 6]) -> Self {
        let rest = PosedBody::<T>::new(cfg, &Pose::rest(cfg.joint_count()), &Shape::mean())
            .expect("rest pose of a validated skeleton");
        let n = rest.bone_count();
        let albedo = (0..n)
            .map(|j| {
                let region = rest.bone_region(j);
                let idx = Region::PARTS.iter().position(|&r| r == region).unwrap_or(0);
                Vec3::from_f64(palette[idx])
            })
            .collect();
        let capsules = (0..n).map(|j| rest.canonical_capsule(j)).collect();
        Self { albedo, capsules }
    }

    pub fn bone_albedo(&self, bone: usize) -> Vec3<T> {
        self.albedo[bone]
    }

    /// Outward normal of the canonical capsule at the code `s`.
    pub fn canonical_normal(&self, coord: &SemanticCoord<T>) -> Vec3<T> {
        let (a, b, _) = self.capsules[coord.bone];
        let axis = b - a;
        let len2 = axis.norm_squared();
        let h = if len2 > T::zero() {
            ((coord.s - a).dot(axis) / len2).max(T::zero()).min(T::one())
        } else {
            T::zero()
        };
        (coord.s - (a + axis * h))
            .try_normalize(T::lit(1e-12))
            .unwrap_or(Vec3::new(T::zero(), T::zero(), T::one()))
    }
}

impl<T: Scalar> RadianceSource<T> for ProceduralAvatar<T> {
    fn eval(&self, coord: &SemanticCoord<T>) -> FieldOutput<T> {
        FieldOutput {
            albedo: self.albedo[coord.bone],
            density: T::zero(),
            normal: self.canonical_normal(coord),
        }
    }

    fn density(&self, _coord: &SemanticCoord<T>) -> T {
        T::zero()
    }

    fn proposal_density(&self, _coord: &SemanticCoord<T>) -> T {
        T::zero()
    }
}
