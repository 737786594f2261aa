//! Pose and shape parameters.

use serde::{Deserialize, Serialize};

use super::BodyError;
use crate::math::Vec3;
use crate::scalar::Scalar;

/// Number of shape scales: global, four length scales, lateral width, four radius scales.
pub const SHAPE_DIM: usize = 10;
pub const SHAPE_MIN: f64 = 0.5;
pub const SHAPE_MAX: f64 = 2.0;

/// Index of the lateral width scale in the shape vector.
pub const WIDTH_INDEX: usize = 5;

/// Per-joint axis-angle rotations plus a root translation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pose<T> {
    pub joint_rotations: Vec<Vec3<T>>,
    pub root_translation: Vec3<T>,
}

impl<T: Scalar> Pose<T> {
    pub fn rest(joints: usize) -> Self {
        Self {
            joint_rotations: vec![Vec3::zero(); joints],
            root_translation: Vec3::zero(),
        }
    }

    pub fn joint_count(&self) -> usize {
        self.joint_rotations.len()
    }

    pub fn validate(&self, joints: usize) -> Result<(), BodyError> {
        if self.joint_rotations.len() != joints {
            return Err(BodyError::InvalidPose(format!(
                "expected {joints} joint rotations, got {}",
                self.joint_rotations.len()
            )));
        }
        let finite = self.joint_rotations.iter().all(|w| w.is_finite())
            && self.root_translation.is_finite();
        if !finite {
            return Err(BodyError::InvalidPose("non-finite pose component".into()));
        }
        Ok(())
    }

    /// Wraps every axis-angle vector so its magnitude is at most pi.
    pub fn canonicalize(&mut self) {
        let two_pi = T::two() * T::PI();
        for w in &mut self.joint_rotations {
            let angle = w.norm();
            if angle > T::PI() {
                let wrapped = angle - two_pi * ((angle + T::PI()) / two_pi).floor();
                *w = *w * (wrapped / angle);
            }
        }
    }

    pub fn canonicalized(mut self) -> Self {
        self.canonicalize();
        self
    }

    /// Non-root joint rotations flattened in joint order.
    pub fn articulation(&self) -> impl Iterator<Item = T> + '_ {
        self.joint_rotations
            .iter()
            .skip(1)
            .flat_map(|w| [w.x, w.y, w.z])
    }

    pub fn cast<U: Scalar>(&self) -> Pose<U> {
        Pose {
            joint_rotations: self.joint_rotations.iter().map(|w| w.cast()).collect(),
            root_translation: self.root_translation.cast(),
        }
    }
}

/// Multiplicative body scales, each within [`SHAPE_MIN`, `SHAPE_MAX`].
///
/// Layout: `[global, torso_len, head_len, arm_len, leg_len, width,
/// torso_radius, head_radius, arm_radius, leg_radius]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Shape<T> {
    pub beta: [T; SHAPE_DIM],
}

impl<T: Scalar> Default for Shape<T> {
    fn default() -> Self {
        Self::mean()
    }
}

impl<T: Scalar> Shape<T> {
    pub fn mean() -> Self {
        Self {
            beta: [T::one(); SHAPE_DIM],
        }
    }

    pub fn validate(&self) -> Result<(), BodyError> {
        let lo = T::lit(SHAPE_MIN);
        let hi = T::lit(SHAPE_MAX);
        match self.beta.iter().position(|&b| !(b >= lo && b <= hi)) {
            Some(i) => Err(BodyError::InvalidShape(format!(
                "shape component {i} = {} outside [{SHAPE_MIN}, {SHAPE_MAX}]",
                self.beta[i]
            ))),
            None => Ok(()),
        }
    }

    /// Clamps every component into bounds; non-finite entries reset to 1.
    pub fn project(&mut self) {
        let lo = T::lit(SHAPE_MIN);
        let hi = T::lit(SHAPE_MAX);
        for b in &mut self.beta {
            *b = if b.is_finite() { b.max(lo).min(hi) } else { T::one() };
        }
    }

    pub fn cast<U: Scalar>(&self) -> Shape<U> {
        Shape {
            beta: self.beta.map(|b| U::lit(b.to_f64_lossy())),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn canonicalize_wraps_large_angles() {
        let mut p = Pose::<f64>::rest(2);
        p.joint_rotations[1] = Vec3::new(0.0, 0.0, 1.5 * std::f64::consts::PI);
        p.canonicalize();
        let w = p.joint_rotations[1];
        assert!((w.z + 0.5 * std::f64::consts::PI).abs() < 1e-12, "{w:?}");
        assert!(w.norm() <= std::f64::consts::PI + 1e-12);
    }

    #[test]
    fn shape_projection_clamps() {
        let mut s = Shape::<f64>::mean();
        s.beta[0] = 5.0;
        s.beta[3] = f64::NAN;
        s.beta[4] = 0.1;
        assert!(s.validate().is_err());
        s.project();
        assert_eq!(s.beta[0], 2.0);
        assert_eq!(s.beta[3], 1.0);
        assert_eq!(s.beta[4], 0.5);
        assert!(s.validate().is_ok());
    }

    #[test]
    fn pose_validation() {
        let p = Pose::<f32>::rest(16);
        assert!(p.validate(16).is_ok());
        assert!(p.validate(15).is_err());
        let mut q = p.clone();
        q.root_translation.y = f32::INFINITY;
        assert!(q.validate(16).is_err());
    }
}
