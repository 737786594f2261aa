#![allow(dead_code)]

use avatar_core::body::{Pose, PosedBody, Region};
use avatar_core::math::Vec3;
use avatar_core::render::{Camera, Ray};
use avatar_core::scalar::Scalar;
use rand::Rng;

/// Sphere-traces the body SDF; true when the ray reaches `d <= 0` inside the scene box.
pub fn sdf_hit<T: Scalar>(body: &PosedBody<T>, ray: &Ray<T>) -> bool {
    let bounds = body.region_bounds(Region::FullBody);
    let Some((near, far)) = bounds.intersect_ray(ray.origin, ray.direction) else {
        return false;
    };
    let mut t = near;
    for _ in 0..2000 {
        let d = body.distance(ray.at(t));
        if d <= T::zero() {
            return true;
        }
        t += d.max(T::lit(1e-5));
        if t > far {
            return false;
        }
    }
    false
}

/// Analytic silhouette: pixel inside iff its central ray hits the zero set.
pub fn sdf_silhouette<T: Scalar>(body: &PosedBody<T>, camera: &Camera<T>) -> Vec<bool> {
    (0..camera.pixel_count())
        .map(|p| sdf_hit(body, &camera.pixel_ray(p)))
        .collect()
}

pub fn iou(a: &[bool], b: &[bool]) -> f64 {
    let inter = a.iter().zip(b).filter(|(x, y)| **x && **y).count();
    let union = a.iter().zip(b).filter(|(x, y)| **x || **y).count();
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

pub fn random_pose<R: Rng>(rng: &mut R, joints: usize, spread: f64) -> Pose<f64> {
    let mut p = Pose::rest(joints);
    for w in p.joint_rotations.iter_mut().skip(1) {
        *w = Vec3::new(
            rng.gen_range(-spread..spread),
            rng.gen_range(-spread..spread),
            rng.gen_range(-spread..spread),
        );
    }
    p.joint_rotations[0] = Vec3::new(0.0, rng.gen_range(-3.1..3.1), 0.0);
    p
}

pub fn random_camera<R: Rng>(rng: &mut R, look_at: Vec3<f64>, size: usize) -> Camera<f64> {
    Camera {
        azimuth: rng.gen_range(0.0..std::f64::consts::TAU),
        elevation: rng.gen_range(-0.3..0.9),
        radius: rng.gen_range(2.2..3.0),
        look_at,
        focal: rng.gen_range(45.0..70.0) * size as f64 / 64.0,
        width: size,
        height: size,
    }
}
