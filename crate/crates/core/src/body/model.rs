//! Posed capsule body: forward kinematics, semantic signed distance and its
//! derivatives with respect to the shape scales.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::pose::{Pose, Shape, SHAPE_DIM, WIDTH_INDEX};
use super::skeleton::{Region, SkeletonConfig};
use super::BodyError;
use crate::math::{Aabb, Mat3, Vec3};
use crate::scalar::{sigmoid, Scalar};

/// Upper bound on bones; keeps per-query scratch on the stack.
pub const MAX_BONES: usize = 32;

const PROJECTION_ITERS: usize = 50;

/// Signed distance plus canonical surface code for a query point.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SemanticCoord<T> {
    /// Signed distance to the posed body (m, negative inside).
    pub d: T,
    /// Nearest surface point expressed on the canonical rest-pose, mean-shape body (m).
    pub s: Vec3<T>,
    /// Bone whose capsule is nearest to the query.
    pub bone: usize,
}

/// Finite-difference SDF gradient; `unit` is `None` when the gradient is degenerate.
#[derive(Clone, Copy, Debug)]
pub struct SdfGradient<T> {
    pub raw: Vec3<T>,
    pub unit: Option<Vec3<T>>,
}

/// `a * sigmoid(-a d)`: a smooth indicator of the body interior, saturating at `a`.
#[inline]
pub fn density_proxy<T: Scalar>(d: T, a: T) -> T {
    a * sigmoid(-a * d)
}

/// Derivative of [`density_proxy`] with respect to `d`.
#[inline]
pub fn density_proxy_derivative<T: Scalar>(d: T, a: T) -> T {
    let s = sigmoid(-a * d);
    -a * a * s * (T::one() - s)
}

#[derive(Clone, Debug)]
struct PosedBone<T> {
    a: Vec3<T>,
    axis: Vec3<T>,
    inv_len2: T,
    radius: T,
    rotation: Mat3<T>,
    canon_a: Vec3<T>,
    canon_axis: Vec3<T>,
    canon_radius: T,
    region: Region,
    /// Derivatives of the posed endpoints and radius with respect to each shape scale.
    da: [Vec3<T>; SHAPE_DIM],
    db: [Vec3<T>; SHAPE_DIM],
    dr: [T; SHAPE_DIM],
}

#[derive(Clone, Copy)]
struct CapsuleHit<T> {
    h: T,
    /// `x - q` for the closest axis point `q`.
    offset: Vec3<T>,
}

struct Kinematics<T> {
    pivots: Vec<Vec3<T>>,
    rotations: Vec<Mat3<T>>,
    capsules: Vec<(Vec3<T>, Vec3<T>, T)>,
}

fn forward_kinematics<T: Scalar>(
    cfg: &SkeletonConfig,
    pose: &Pose<T>,
    beta: &[T; SHAPE_DIM],
) -> Kinematics<T> {
    let n = cfg.joint_count();
    let mut pivots = Vec::with_capacity(n);
    let mut rotations: Vec<Mat3<T>> = Vec::with_capacity(n);
    let mut capsules = Vec::with_capacity(n);
    let global = beta[0];
    for (i, bone) in cfg.bones.iter().enumerate() {
        let local = Mat3::from_axis_angle(pose.joint_rotations[i]);
        let pivot_rest = Vec3::<T>::from_f64(bone.pivot);
        let (pivot, rot) = match cfg.parent(i) {
            None => (pivot_rest + pose.root_translation, local),
            Some(p) => {
                let parent = &cfg.bones[p];
                let mut offset = pivot_rest - Vec3::from_f64(parent.pivot);
                offset = offset * (global * beta[parent.group.length_index()]);
                if parent.group != bone.group {
                    offset.x *= beta[WIDTH_INDEX];
                }
                let prot = rotations[p];
                (pivots[p] + prot.mul_vec(offset), prot.mul_mat(&local))
            }
        };
        let len_scale = global * beta[bone.group.length_index()];
        let end = |e: [f64; 3]| pivot + rot.mul_vec((Vec3::from_f64(e) - pivot_rest) * len_scale);
        let radius = T::lit(bone.radius) * global * beta[bone.group.radius_index()];
        capsules.push((end(bone.endpoints[0]), end(bone.endpoints[1]), radius));
        pivots.push(pivot);
        rotations.push(rot);
    }
    Kinematics {
        pivots,
        rotations,
        capsules,
    }
}

/// The capsule body at a fixed pose and shape.
#[derive(Clone, Debug)]
pub struct PosedBody<T> {
    bones: Vec<PosedBone<T>>,
    pivots: Vec<Vec3<T>>,
    temperature: T,
    sharpness: T,
    margin: T,
}

impl<T: Scalar> PosedBody<T> {
    pub fn new(cfg: &SkeletonConfig, pose: &Pose<T>, shape: &Shape<T>) -> Result<Self, BodyError> {
        let n = cfg.joint_count();
        if n > MAX_BONES {
            return Err(BodyError::InvalidSkeleton(format!(
                "{n} bones exceeds the supported maximum of {MAX_BONES}"
            )));
        }
        pose.validate(n)?;
        shape.validate()?;
        let pose = pose.clone().canonicalized();

        let kin = forward_kinematics(cfg, &pose, &shape.beta);
        // Endpoints and radii are multilinear in the shape scales, so a central
        // difference along one scale is exact up to rounding.
        let mut jac_a = vec![[Vec3::zero(); SHAPE_DIM]; n];
        let mut jac_b = vec![[Vec3::zero(); SHAPE_DIM]; n];
        let mut jac_r = vec![[T::zero(); SHAPE_DIM]; n];
        let step = T::half();
        for k in 0..SHAPE_DIM {
            let mut hi = shape.beta;
            let mut lo = shape.beta;
            hi[k] += step;
            lo[k] -= step;
            let kh = forward_kinematics(cfg, &pose, &hi);
            let kl = forward_kinematics(cfg, &pose, &lo);
            for i in 0..n {
                let inv = T::one() / (step + step);
                jac_a[i][k] = (kh.capsules[i].0 - kl.capsules[i].0) * inv;
                jac_b[i][k] = (kh.capsules[i].1 - kl.capsules[i].1) * inv;
                jac_r[i][k] = (kh.capsules[i].2 - kl.capsules[i].2) * inv;
            }
        }

        let bones = cfg
            .bones
            .iter()
            .enumerate()
            .map(|(i, spec)| {
                let (a, b, radius) = kin.capsules[i];
                let axis = b - a;
                let len2 = axis.norm_squared();
                let canon_a = Vec3::from_f64(spec.endpoints[0]);
                let canon_b = Vec3::from_f64(spec.endpoints[1]);
                PosedBone {
                    a,
                    axis,
                    inv_len2: if len2 > T::lit(1e-20) {
                        T::one() / len2
                    } else {
                        T::zero()
                    },
                    radius,
                    rotation: kin.rotations[i],
                    canon_a,
                    canon_axis: canon_b - canon_a,
                    canon_radius: T::lit(spec.radius),
                    region: spec.region,
                    da: jac_a[i],
                    db: jac_b[i],
                    dr: jac_r[i],
                }
            })
            .collect();

        let temperature = if n > 1 {
            T::lit(cfg.blend_radius / (n as f64).ln())
        } else {
            T::zero()
        };
        Ok(Self {
            bones,
            pivots: kin.pivots,
            temperature,
            sharpness: T::lit(cfg.sharpness),
            margin: T::lit(cfg.region_margin),
        })
    }

    pub fn bone_count(&self) -> usize {
        self.bones.len()
    }

    /// Density sharpness `a` (1/m).
    pub fn sharpness(&self) -> T {
        self.sharpness
    }

    /// Posed pivot (joint) positions.
    pub fn pivots(&self) -> &[Vec3<T>] {
        &self.pivots
    }

    /// Posed capsule segment `(a, b, radius)` for a bone.
    pub fn capsule(&self, bone: usize) -> (Vec3<T>, Vec3<T>, T) {
        let b = &self.bones[bone];
        (b.a, b.a + b.axis, b.radius)
    }

    pub fn bone_rotation(&self, bone: usize) -> Mat3<T> {
        self.bones[bone].rotation
    }

    pub fn bone_region(&self, bone: usize) -> Region {
        self.bones[bone].region
    }

    /// Canonical capsule `(a, b, radius)` for a bone.
    pub fn canonical_capsule(&self, bone: usize) -> (Vec3<T>, Vec3<T>, T) {
        let b = &self.bones[bone];
        (b.canon_a, b.canon_a + b.canon_axis, b.canon_radius)
    }

    #[inline]
    fn capsule_hit(&self, j: usize, x: Vec3<T>) -> CapsuleHit<T> {
        let bone = &self.bones[j];
        let w = x - bone.a;
        let h = (w.dot(bone.axis) * bone.inv_len2).max(T::zero()).min(T::one());
        let offset = w - bone.axis * h;
        CapsuleHit {
            h,
            offset,
        }
    }

    /// Distances to every capsule, returning the nearest index.
    #[inline]
    fn capsule_distances(&self, x: Vec3<T>, out: &mut [T; MAX_BONES]) -> usize {
        let mut best = 0;
        for j in 0..self.bones.len() {
            let bone = &self.bones[j];
            let w = x - bone.a;
            let h = (w.dot(bone.axis) * bone.inv_len2).max(T::zero()).min(T::one());
            out[j] = (w - bone.axis * h).norm() - bone.radius;
            if out[j] < out[best] {
                best = j;
            }
        }
        best
    }

    /// Smooth union of the capsule distances; fills `weights` with the softmax
    /// responsibilities when provided.
    #[inline]
    fn blend(&self, dists: &[T; MAX_BONES], nearest: usize, weights: Option<&mut [T; MAX_BONES]>) -> T {
        let n = self.bones.len();
        let m = dists[nearest];
        let tau = self.temperature;
        if tau <= T::zero() {
            if let Some(w) = weights {
                w[..n].iter_mut().for_each(|v| *v = T::zero());
                w[nearest] = T::one();
            }
            return m;
        }
        let cutoff = T::lit(36.0) * tau;
        let mut sum = T::zero();
        let mut scratch = [T::zero(); MAX_BONES];
        for j in 0..n {
            let gap = dists[j] - m;
            if gap < cutoff {
                let e = (-gap / tau).exp();
                scratch[j] = e;
                sum += e;
            }
        }
        if let Some(w) = weights {
            let inv = T::one() / sum;
            for j in 0..n {
                w[j] = scratch[j] * inv;
            }
        }
        m - tau * sum.ln()
    }

    /// Signed distance only.
    #[inline]
    pub fn distance(&self, x: Vec3<T>) -> T {
        let mut dists = [T::zero(); MAX_BONES];
        let nearest = self.capsule_distances(x, &mut dists);
        self.blend(&dists, nearest, None)
    }

    /// Canonical code for the nearest point on capsule `j`.
    #[inline]
    fn canonical_code(&self, j: usize, hit: &CapsuleHit<T>) -> Vec3<T> {
        let bone = &self.bones[j];
        let dir = self.offset_direction(j, hit.offset);
        bone.canon_a + bone.canon_axis * hit.h + bone.rotation.transpose_mul_vec(dir) * bone.canon_radius
    }

    #[inline]
    fn offset_direction(&self, j: usize, offset: Vec3<T>) -> Vec3<T> {
        if let Some(n) = offset.try_normalize(T::lit(1e-12)) {
            return n;
        }
        // Query on the capsule axis: any direction perpendicular to the axis is nearest.
        let axis = self.bones[j].axis;
        let pick = if axis.x.abs() < T::lit(0.9) * axis.norm() || axis.norm() == T::zero() {
            Vec3::unit(0)
        } else {
            Vec3::unit(1)
        };
        let perp = pick - axis * (pick.dot(axis) * self.bones[j].inv_len2);
        perp.normalize()
    }

    /// Semantic signed distance `(d, s)` at a world point.
    pub fn evaluate(&self, x: Vec3<T>) -> SemanticCoord<T> {
        let mut dists = [T::zero(); MAX_BONES];
        let nearest = self.capsule_distances(x, &mut dists);
        let d = self.blend(&dists, nearest, None);
        let hit = self.capsule_hit(nearest, x);
        SemanticCoord {
            d,
            s: self.canonical_code(nearest, &hit),
            bone: nearest,
        }
    }

    /// Signed distance with its analytic spatial gradient.
    pub fn distance_and_gradient(&self, x: Vec3<T>) -> (T, Vec3<T>) {
        let mut dists = [T::zero(); MAX_BONES];
        let mut weights = [T::zero(); MAX_BONES];
        let nearest = self.capsule_distances(x, &mut dists);
        let d = self.blend(&dists, nearest, Some(&mut weights));
        let mut g = Vec3::zero();
        for j in 0..self.bones.len() {
            if weights[j] > T::zero() {
                let hit = self.capsule_hit(j, x);
                g += self.offset_direction(j, hit.offset) * weights[j];
            }
        }
        (d, g)
    }

    /// Largest softmax responsibility at `x`; 1 away from blend seams.
    pub fn blend_dominance(&self, x: Vec3<T>) -> T {
        let mut dists = [T::zero(); MAX_BONES];
        let mut weights = [T::zero(); MAX_BONES];
        let nearest = self.capsule_distances(x, &mut dists);
        self.blend(&dists, nearest, Some(&mut weights));
        weights[..self.bones.len()]
            .iter()
            .fold(T::zero(), |acc, &w| acc.max(w))
    }

    /// Central finite-difference gradient of `d`.
    pub fn sdf_spatial_gradient(&self, x: Vec3<T>, step: T) -> SdfGradient<T> {
        assert!(step > T::zero(), "finite-difference step must be positive");
        let mut raw = Vec3::zero();
        for axis in 0..3 {
            let e = Vec3::unit(axis) * step;
            let g = (self.distance(x + e) - self.distance(x - e)) / (step + step);
            match axis {
                0 => raw.x = g,
                1 => raw.y = g,
                _ => raw.z = g,
            }
        }
        SdfGradient {
            raw,
            unit: raw.try_normalize(T::lit(1e-8)),
        }
    }

    /// Vector-Jacobian product of `(d, s)` at `x` with respect to the shape scales.
    ///
    /// `grad_d` and `grad_s` are upstream derivatives of a scalar objective.
    pub fn shape_vjp(&self, x: Vec3<T>, grad_d: T, grad_s: Vec3<T>) -> [T; SHAPE_DIM] {
        let mut out = [T::zero(); SHAPE_DIM];
        let mut dists = [T::zero(); MAX_BONES];
        let mut weights = [T::zero(); MAX_BONES];
        let nearest = self.capsule_distances(x, &mut dists);
        self.blend(&dists, nearest, Some(&mut weights));

        let mut accumulate = |bone: &PosedBone<T>, ga: Vec3<T>, gb: Vec3<T>, gr: T| {
            for k in 0..SHAPE_DIM {
                out[k] += ga.dot(bone.da[k]) + gb.dot(bone.db[k]) + gr * bone.dr[k];
            }
        };

        if grad_d != T::zero() {
            for j in 0..self.bones.len() {
                let w = weights[j];
                if w == T::zero() {
                    continue;
                }
                let hit = self.capsule_hit(j, x);
                let n = self.offset_direction(j, hit.offset);
                let scale = grad_d * w;
                accumulate(
                    &self.bones[j],
                    n * (-(T::one() - hit.h) * scale),
                    n * (-hit.h * scale),
                    -scale,
                );
            }
        }

        if grad_s != Vec3::zero() {
            let bone = &self.bones[nearest];
            let hit = self.capsule_hit(nearest, x);
            let rho = hit.offset.norm();
            if rho > T::lit(1e-9) {
                let n = hit.offset * (T::one() / rho);
                let e = bone.axis;
                let w = x - bone.a;
                let g_h = grad_s.dot(bone.canon_axis);
                let g_n = bone.rotation.mul_vec(grad_s) * bone.canon_radius;
                let g_q = (g_n - n * n.dot(g_n)) * (-T::one() / rho);
                let g_h_total = g_h + g_q.dot(e);
                let interior = hit.h > T::zero() && hit.h < T::one();
                let (dh_da, dh_db) = if interior {
                    let two_h = hit.h + hit.h;
                    (
                        (-e - w + e * two_h) * bone.inv_len2,
                        (w - e * two_h) * bone.inv_len2,
                    )
                } else {
                    (Vec3::zero(), Vec3::zero())
                };
                accumulate(
                    bone,
                    g_q * (T::one() - hit.h) + dh_da * g_h_total,
                    g_q * hit.h + dh_db * g_h_total,
                    T::zero(),
                );
            }
        }
        out
    }

    /// Box around the posed capsules of a region, padded by the configured margin.
    pub fn region_bounds(&self, region: Region) -> Aabb<T> {
        let mut b = Aabb::empty();
        for bone in &self.bones {
            if region == Region::FullBody || bone.region == region {
                b.grow_sphere(bone.a, bone.radius);
                b.grow_sphere(bone.a + bone.axis, bone.radius);
            }
        }
        b.padded(self.margin)
    }

    /// Points on the union surface (`|d| <= 1e-3`), seeded uniformly over bones.
    pub fn sample_surface_points(&self, n: usize, seed: u64) -> Result<Vec<Vec3<T>>, BodyError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tol = T::lit(1e-4);
        let mut out = Vec::with_capacity(n);
        for index in 0..n {
            let j = rng.gen_range(0..self.bones.len());
            let bone = &self.bones[j];
            let h = T::lit(rng.gen::<f64>());
            let dir = loop {
                let v = Vec3::<f64>::new(
                    rng.gen::<f64>() * 2.0 - 1.0,
                    rng.gen::<f64>() * 2.0 - 1.0,
                    rng.gen::<f64>() * 2.0 - 1.0,
                );
                let l = v.norm();
                if l > 1e-3 && l <= 1.0 {
                    break (v * (1.0 / l)).cast::<T>();
                }
            };
            let mut x = bone.a + bone.axis * h + dir * bone.radius;
            let mut converged = false;
            for _ in 0..PROJECTION_ITERS {
                let (d, g) = self.distance_and_gradient(x);
                if d.abs() <= tol {
                    converged = true;
                    break;
                }
                let g2 = g.norm_squared();
                if g2 < T::lit(1e-12) {
                    break;
                }
                x -= g * (d / g2);
            }
            if !converged {
                return Err(BodyError::SurfaceProjection { seed_index: index });
            }
            out.push(x);
        }
        Ok(out)
    }
}
