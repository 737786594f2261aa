//! Small fixed-size linear algebra: 3-vectors, 3x3 rotations and boxes.

use std::ops::{Add, AddAssign, Div, Index, IndexMut, Mul, Neg, Sub, SubAssign};

use serde::{Deserialize, Serialize};

use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Vec3<T> {
    pub x: T,
    pub y: T,
    pub z: T,
}

impl<T: Scalar> Vec3<T> {
    #[inline]
    pub const fn new(x: T, y: T, z: T) -> Self {
        Self { x, y, z }
    }

    #[inline]
    pub fn zero() -> Self {
        Self::new(T::zero(), T::zero(), T::zero())
    }

    #[inline]
    pub fn splat(v: T) -> Self {
        Self::new(v, v, v)
    }

    #[inline]
    pub fn unit(axis: usize) -> Self {
        let mut v = Self::zero();
        match axis {
            0 => v.x = T::one(),
            1 => v.y = T::one(),
            _ => v.z = T::one(),
        }
        v
    }

    pub fn from_f64(v: [f64; 3]) -> Self {
        Self::new(T::lit(v[0]), T::lit(v[1]), T::lit(v[2]))
    }

    pub fn to_f64(self) -> [f64; 3] {
        [self.x.to_f64_lossy(), self.y.to_f64_lossy(), self.z.to_f64_lossy()]
    }

    pub fn cast<U: Scalar>(self) -> Vec3<U> {
        Vec3::new(
            U::lit(self.x.to_f64_lossy()),
            U::lit(self.y.to_f64_lossy()),
            U::lit(self.z.to_f64_lossy()),
        )
    }

    #[inline]
    pub fn dot(self, o: Self) -> T {
        self.x * o.x + self.y * o.y + self.z * o.z
    }

    #[inline]
    pub fn cross(self, o: Self) -> Self {
        Self::new(
            self.y * o.z - self.z * o.y,
            self.z * o.x - self.x * o.z,
            self.x * o.y - self.y * o.x,
        )
    }

    #[inline]
    pub fn norm_squared(self) -> T {
        self.dot(self)
    }

    #[inline]
    pub fn norm(self) -> T {
        self.norm_squared().sqrt()
    }

    /// Unit vector, or `None` when the length is below `eps`.
    #[inline]
    pub fn try_normalize(self, eps: T) -> Option<Self> {
        let n = self.norm();
        if n > eps {
            Some(self * (T::one() / n))
        } else {
            None
        }
    }

    #[inline]
    pub fn normalize(self) -> Self {
        self * (T::one() / self.norm())
    }

    #[inline]
    pub fn mul_elem(self, o: Self) -> Self {
        Self::new(self.x * o.x, self.y * o.y, self.z * o.z)
    }

    #[inline]
    pub fn min_elem(self, o: Self) -> Self {
        Self::new(self.x.min(o.x), self.y.min(o.y), self.z.min(o.z))
    }

    #[inline]
    pub fn max_elem(self, o: Self) -> Self {
        Self::new(self.x.max(o.x), self.y.max(o.y), self.z.max(o.z))
    }

    #[inline]
    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }

    #[inline]
    pub fn to_array(self) -> [T; 3] {
        [self.x, self.y, self.z]
    }

    #[inline]
    pub fn from_slice(s: &[T]) -> Self {
        Self::new(s[0], s[1], s[2])
    }
}

impl<T: Scalar> Add for Vec3<T> {
    type Output = Self;
    #[inline]
    fn add(self, o: Self) -> Self {
        Self::new(self.x + o.x, self.y + o.y, self.z + o.z)
    }
}

impl<T: Scalar> AddAssign for Vec3<T> {
    #[inline]
    fn add_assign(&mut self, o: Self) {
        self.x += o.x;
        self.y += o.y;
        self.z += o.z;
    }
}

impl<T: Scalar> Sub for Vec3<T> {
    type Output = Self;
    #[inline]
    fn sub(self, o: Self) -> Self {
        Self::new(self.x - o.x, self.y - o.y, self.z - o.z)
    }
}

impl<T: Scalar> SubAssign for Vec3<T> {
    #[inline]
    fn sub_assign(&mut self, o: Self) {
        self.x -= o.x;
        self.y -= o.y;
        self.z -= o.z;
    }
}

impl<T: Scalar> Mul<T> for Vec3<T> {
    type Output = Self;
    #[inline]
    fn mul(self, s: T) -> Self {
        Self::new(self.x * s, self.y * s, self.z * s)
    }
}

impl<T: Scalar> Div<T> for Vec3<T> {
    type Output = Self;
    #[inline]
    fn div(self, s: T) -> Self {
        Self::new(self.x / s, self.y / s, self.z / s)
    }
}

impl<T: Scalar> Neg for Vec3<T> {
    type Output = Self;
    #[inline]
    fn neg(self) -> Self {
        Self::new(-self.x, -self.y, -self.z)
    }
}

impl<T> Index<usize> for Vec3<T> {
    type Output = T;
    #[inline]
    fn index(&self, i: usize) -> &T {
        match i {
            0 => &self.x,
            1 => &self.y,
            2 => &self.z,
            _ => panic!("Vec3 index {i} out of range"),
        }
    }
}

impl<T> IndexMut<usize> for Vec3<T> {
    #[inline]
    fn index_mut(&mut self, i: usize) -> &mut T {
        match i {
            0 => &mut self.x,
            1 => &mut self.y,
            2 => &mut self.z,
            _ => panic!("Vec3 index {i} out of range"),
        }
    }
}

/// Row-major 3x3 matrix, used for rotations.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Mat3<T> {
    pub rows: [Vec3<T>; 3],
}

impl<T: Scalar> Mat3<T> {
    pub fn identity() -> Self {
        Self {
            rows: [Vec3::unit(0), Vec3::unit(1), Vec3::unit(2)],
        }
    }

    pub fn from_rows(r0: Vec3<T>, r1: Vec3<T>, r2: Vec3<T>) -> Self {
        Self { rows: [r0, r1, r2] }
    }

    #[inline]
    pub fn mul_vec(&self, v: Vec3<T>) -> Vec3<T> {
        Vec3::new(self.rows[0].dot(v), self.rows[1].dot(v), self.rows[2].dot(v))
    }

    /// `self^T v`, the inverse action for rotations.
    #[inline]
    pub fn transpose_mul_vec(&self, v: Vec3<T>) -> Vec3<T> {
        self.rows[0] * v.x + self.rows[1] * v.y + self.rows[2] * v.z
    }

    pub fn transpose(&self) -> Self {
        let c = |j: usize| Vec3::new(self.rows[0][j], self.rows[1][j], self.rows[2][j]);
        Self::from_rows(c(0), c(1), c(2))
    }

    pub fn mul_mat(&self, o: &Self) -> Self {
        let ot = o.transpose();
        let row = |r: Vec3<T>| Vec3::new(r.dot(ot.rows[0]), r.dot(ot.rows[1]), r.dot(ot.rows[2]));
        Self::from_rows(row(self.rows[0]), row(self.rows[1]), row(self.rows[2]))
    }

    /// Rodrigues' formula for an axis-angle vector (angle = length).
    pub fn from_axis_angle(w: Vec3<T>) -> Self {
        let theta2 = w.norm_squared();
        // Second-order series below the threshold keeps the map smooth near zero.
        let (a, b) = if theta2 < T::lit(1e-12) {
            (T::one() - theta2 / T::lit(6.0), T::half() - theta2 / T::lit(24.0))
        } else {
            let theta = theta2.sqrt();
            (theta.sin() / theta, (T::one() - theta.cos()) / theta2)
        };
        let (x, y, z) = (w.x, w.y, w.z);
        let one = T::one();
        Self::from_rows(
            Vec3::new(one - b * (y * y + z * z), b * x * y - a * z, b * x * z + a * y),
            Vec3::new(b * x * y + a * z, one - b * (x * x + z * z), b * y * z - a * x),
            Vec3::new(b * x * z - a * y, b * y * z + a * x, one - b * (x * x + y * y)),
        )
    }

    /// Logarithm map back to an axis-angle vector with angle in [0, pi].
    pub fn to_axis_angle(&self) -> Vec3<T> {
        let r = &self.rows;
        let trace = r[0].x + r[1].y + r[2].z;
        let cos = ((trace - T::one()) * T::half()).max(-T::one()).min(T::one());
        let theta = cos.acos();
        let skew = Vec3::new(r[2].y - r[1].z, r[0].z - r[2].x, r[1].x - r[0].y);
        if theta < T::lit(1e-6) {
            return skew * T::half();
        }
        if T::PI() - theta > T::lit(1e-4) {
            return skew * (theta / (T::two() * theta.sin()));
        }
        // Near pi: axis from the symmetric part.
        let diag = [r[0].x, r[1].y, r[2].z];
        let k = (0..3)
            .max_by(|&a, &b| diag[a].partial_cmp(&diag[b]).unwrap())
            .unwrap_or(0);
        let col = Vec3::new(
            (r[0][k] + r[k].x) * T::half(),
            (r[1][k] + r[k].y) * T::half(),
            (r[2][k] + r[k].z) * T::half(),
        );
        let mut axis = col.normalize();
        if axis.dot(skew) < T::zero() {
            axis = -axis;
        }
        axis * theta
    }
}

/// Axis-aligned box.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aabb<T> {
    pub min: Vec3<T>,
    pub max: Vec3<T>,
}

impl<T: Scalar> Aabb<T> {
    pub fn empty() -> Self {
        Self {
            min: Vec3::splat(T::infinity()),
            max: Vec3::splat(T::neg_infinity()),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.min.x > self.max.x || self.min.y > self.max.y || self.min.z > self.max.z
    }

    pub fn grow_point(&mut self, p: Vec3<T>) {
        self.min = self.min.min_elem(p);
        self.max = self.max.max_elem(p);
    }

    pub fn grow_sphere(&mut self, c: Vec3<T>, r: T) {
        self.grow_point(c - Vec3::splat(r));
        self.grow_point(c + Vec3::splat(r));
    }

    pub fn union(&self, o: &Self) -> Self {
        Self {
            min: self.min.min_elem(o.min),
            max: self.max.max_elem(o.max),
        }
    }

    pub fn padded(&self, margin: T) -> Self {
        Self {
            min: self.min - Vec3::splat(margin),
            max: self.max + Vec3::splat(margin),
        }
    }

    pub fn center(&self) -> Vec3<T> {
        (self.min + self.max) * T::half()
    }

    pub fn extent(&self) -> Vec3<T> {
        self.max - self.min
    }

    pub fn contains(&self, p: Vec3<T>) -> bool {
        p.x >= self.min.x
            && p.y >= self.min.y
            && p.z >= self.min.z
            && p.x <= self.max.x
            && p.y <= self.max.y
            && p.z <= self.max.z
    }

    pub fn contains_box(&self, o: &Self) -> bool {
        self.contains(o.min) && self.contains(o.max)
    }

    pub fn corners(&self) -> [Vec3<T>; 8] {
        let (a, b) = (self.min, self.max);
        [
            Vec3::new(a.x, a.y, a.z),
            Vec3::new(b.x, a.y, a.z),
            Vec3::new(a.x, b.y, a.z),
            Vec3::new(b.x, b.y, a.z),
            Vec3::new(a.x, a.y, b.z),
            Vec3::new(b.x, a.y, b.z),
            Vec3::new(a.x, b.y, b.z),
            Vec3::new(b.x, b.y, b.z),
        ]
    }

    /// Slab test; returns the parametric entry/exit distances clipped to t >= 0.
    pub fn intersect_ray(&self, origin: Vec3<T>, dir: Vec3<T>) -> Option<(T, T)> {
        let mut t0 = T::zero();
        let mut t1 = T::infinity();
        for axis in 0..3 {
            let o = origin[axis];
            let d = dir[axis];
            let (lo, hi) = (self.min[axis], self.max[axis]);
            if d.abs() < T::lit(1e-12) {
                if o < lo || o > hi {
                    return None;
                }
                continue;
            }
            let inv = T::one() / d;
            let mut ta = (lo - o) * inv;
            let mut tb = (hi - o) * inv;
            if ta > tb {
                std::mem::swap(&mut ta, &mut tb);
            }
            t0 = t0.max(ta);
            t1 = t1.min(tb);
            if t0 >= t1 {
                return None;
            }
        }
        Some((t0, t1))
    }
}
