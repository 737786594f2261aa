//! Second-order spherical harmonics irradiance.

use serde::{Deserialize, Serialize};

use crate::math::Vec3;
use crate::scalar::Scalar;

pub const SH_BASIS: usize = 9;
pub const SH_COEFFS: usize = SH_BASIS + 1;

const C0: f64 = 0.282_094_791_773_878_14;
const C1: f64 = 0.488_602_511_902_919_9;
const C2: f64 = 1.092_548_430_592_079_2;
const C3: f64 = 0.315_391_565_252_520_05;
const C4: f64 = 0.546_274_215_296_039_6;

/// Real SH basis for bands `l <= 2`, ordered by `(l, m)` with `m` ascending.
pub fn sh_basis<T: Scalar>(n: Vec3<T>) -> [T; SH_BASIS] {
    let (x, y, z) = (n.x, n.y, n.z);
    let c = T::lit;
    [
        c(C0),
        c(C1) * y,
        c(C1) * z,
        c(C1) * x,
        c(C2) * x * y,
        c(C2) * y * z,
        c(C3) * (c(3.0) * z * z - T::one()),
        c(C2) * x * z,
        c(C4) * (x * x - y * y),
    ]
}

/// Jacobian rows of [`sh_basis`] with respect to the normal.
pub fn sh_basis_grad<T: Scalar>(n: Vec3<T>) -> [Vec3<T>; SH_BASIS] {
    let (x, y, z) = (n.x, n.y, n.z);
    let c = T::lit;
    let o = T::zero();
    [
        Vec3::zero(),
        Vec3::new(o, c(C1), o),
        Vec3::new(o, o, c(C1)),
        Vec3::new(c(C1), o, o),
        Vec3::new(c(C2) * y, c(C2) * x, o),
        Vec3::new(o, c(C2) * z, c(C2) * y),
        Vec3::new(o, o, c(6.0 * C3) * z),
        Vec3::new(c(C2) * z, o, c(C2) * x),
        Vec3::new(c(2.0 * C4) * x, -c(2.0 * C4) * y, o),
    ]
}

/// Nine SH coefficients plus an ambient offset.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShLighting<T> {
    pub coeffs: [T; SH_COEFFS],
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ShadeGrad<T> {
    pub albedo: Vec3<T>,
    pub normal: Vec3<T>,
    pub lighting: [T; SH_COEFFS],
}

impl<T: Scalar> ShLighting<T> {
    pub fn zero() -> Self {
        Self {
            coeffs: [T::zero(); SH_COEFFS],
        }
    }

    /// Constant irradiance `e` from every direction.
    pub fn uniform(e: T) -> Self {
        let mut coeffs = [T::zero(); SH_COEFFS];
        coeffs[0] = e / T::lit(C0);
        Self { coeffs }
    }

    pub fn is_finite(&self) -> bool {
        self.coeffs.iter().all(|c| c.is_finite())
    }

    pub fn irradiance(&self, n: Vec3<T>) -> T {
        let y = sh_basis(n);
        let mut e = self.coeffs[SH_BASIS];
        for k in 0..SH_BASIS {
            e += self.coeffs[k] * y[k];
        }
        e
    }

    pub fn shade(&self, albedo: Vec3<T>, n: Vec3<T>) -> Vec3<T> {
        let e = self.irradiance(n).max(T::zero());
        let clamp = |v: T| v.max(T::zero()).min(T::one());
        Vec3::new(clamp(albedo.x * e), clamp(albedo.y * e), clamp(albedo.z * e))
    }

    pub fn shade_backward(&self, albedo: Vec3<T>, n: Vec3<T>, upstream: Vec3<T>) -> ShadeGrad<T> {
        let mut out = ShadeGrad {
            albedo: Vec3::zero(),
            normal: Vec3::zero(),
            lighting: [T::zero(); SH_COEFFS],
        };
        let e = self.irradiance(n);
        if !(e > T::zero()) {
            return out;
        }
        let mut de = T::zero();
        for k in 0..3 {
            let v = albedo[k] * e;
            if v > T::zero() && v < T::one() {
                out.albedo[k] = upstream[k] * e;
                de += upstream[k] * albedo[k];
            }
        }
        if de == T::zero() {
            return out;
        }
        let y = sh_basis(n);
        let dy = sh_basis_grad(n);
        for k in 0..SH_BASIS {
            out.lighting[k] = de * y[k];
            out.normal += dy[k] * (de * self.coeffs[k]);
        }
        out.lighting[SH_BASIS] = de;
        out
    }

    pub fn cast<U: Scalar>(&self) -> ShLighting<U> {
        ShLighting {
            coeffs: self.coeffs.map(|c| U::lit(c.to_f64_lossy())),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_light_returns_albedo() {
        let h = ShLighting::<f64>::uniform(1.0);
        let c = Vec3::new(0.2, 0.4, 0.9);
        let n = Vec3::new(0.3, -0.5, 0.8).normalize();
        assert!((h.shade(c, n) - c).norm() < 1e-12);
        assert_eq!(ShLighting::<f64>::zero().shade(c, n), Vec3::zero());
    }

    #[test]
    fn basis_gradient_matches_finite_differences() {
        let n = Vec3::new(0.3f64, -0.4, 0.7);
        let g = sh_basis_grad(n);
        let h = 1e-6;
        for axis in 0..3 {
            let e = Vec3::unit(axis) * h;
            let up = sh_basis(n + e);
            let dn = sh_basis(n - e);
            for k in 0..SH_BASIS {
                let fd = (up[k] - dn[k]) / (2.0 * h);
                assert!((fd - g[k][axis]).abs() < 1e-8);
            }
        }
    }
}
