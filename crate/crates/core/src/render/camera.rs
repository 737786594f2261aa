use serde::{Deserialize, Serialize};

use super::RenderError;
use crate::math::Vec3;
use crate::scalar::Scalar;

/// Pinhole camera on a sphere around a look-at point. World up is `+y`;
/// azimuth 0 places the camera on the `+z` side looking back at the body.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Camera<T> {
    pub azimuth: T,
    pub elevation: T,
    pub radius: T,
    pub look_at: Vec3<T>,
    /// Focal length in pixels.
    pub focal: T,
    pub width: usize,
    pub height: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ray<T> {
    pub origin: Vec3<T>,
    pub direction: Vec3<T>,
}

impl<T: Scalar> Ray<T> {
    pub fn at(&self, t: T) -> Vec3<T> {
        self.origin + self.direction * t
    }
}

impl<T: Scalar> Camera<T> {
    pub fn validate(&self) -> Result<(), RenderError> {
        let half_pi = T::FRAC_PI_2();
        let ok = self.radius > T::zero()
            && self.radius.is_finite()
            && self.focal > T::zero()
            && self.focal.is_finite()
            && self.width >= 1
            && self.height >= 1
            && self.elevation > -half_pi
            && self.elevation < half_pi
            && self.azimuth.is_finite()
            && self.look_at.is_finite();
        if ok {
            Ok(())
        } else {
            Err(RenderError::InvalidCamera(format!("{self:?}")))
        }
    }

    pub fn origin(&self) -> Vec3<T> {
        let (se, ce) = self.elevation.sin_cos();
        let (sa, ca) = self.azimuth.sin_cos();
        self.look_at + Vec3::new(ce * sa, se, ce * ca) * self.radius
    }

    /// Orthonormal `(right, up, forward)` frame.
    pub fn basis(&self) -> (Vec3<T>, Vec3<T>, Vec3<T>) {
        let forward = (self.look_at - self.origin()).normalize();
        let world_up = Vec3::new(T::zero(), T::one(), T::zero());
        let right = forward.cross(world_up).normalize();
        let up = right.cross(forward);
        (right, up, forward)
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }

    /// Ray through the center of pixel `(col, row)`; row 0 is the top of the image.
    pub fn ray(&self, col: usize, row: usize) -> Ray<T> {
        let (right, up, forward) = self.basis();
        self.ray_in_basis(col, row, right, up, forward)
    }

    fn ray_in_basis(&self, col: usize, row: usize, right: Vec3<T>, up: Vec3<T>, forward: Vec3<T>) -> Ray<T> {
        let half = T::half();
        let px = (T::from_usize_lossy(col) + half - T::from_usize_lossy(self.width) * half) / self.focal;
        let py = -(T::from_usize_lossy(row) + half - T::from_usize_lossy(self.height) * half) / self.focal;
        Ray {
            origin: self.origin(),
            direction: (forward + right * px + up * py).normalize(),
        }
    }

    /// Ray for a linear pixel index (row-major).
    pub fn pixel_ray(&self, index: usize) -> Ray<T> {
        self.ray(index % self.width, index / self.width)
    }

    /// All rays in row-major order.
    pub fn generate_rays(&self) -> Vec<Ray<T>> {
        let (right, up, forward) = self.basis();
        (0..self.pixel_count())
            .map(|i| self.ray_in_basis(i % self.width, i / self.width, right, up, forward))
            .collect()
    }

    /// Projects a world point to continuous pixel coordinates, if in front of the camera.
    pub fn project(&self, p: Vec3<T>) -> Option<(T, T)> {
        let (right, up, forward) = self.basis();
        let rel = p - self.origin();
        let z = rel.dot(forward);
        if z <= T::zero() {
            return None;
        }
        let half = T::half();
        let u = rel.dot(right) / z * self.focal + T::from_usize_lossy(self.width) * half;
        let v = -rel.dot(up) / z * self.focal + T::from_usize_lossy(self.height) * half;
        Some((u, v))
    }

    pub fn cast<U: Scalar>(&self) -> Camera<U> {
        Camera {
            azimuth: U::lit(self.azimuth.to_f64_lossy()),
            elevation: U::lit(self.elevation.to_f64_lossy()),
            radius: U::lit(self.radius.to_f64_lossy()),
            look_at: self.look_at.cast(),
            focal: U::lit(self.focal.to_f64_lossy()),
            width: self.width,
            height: self.height,
        }
    }
}
