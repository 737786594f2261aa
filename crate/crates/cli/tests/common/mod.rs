#![allow(dead_code)]

use avatar_core::body::{PosedBody, Region, SemanticCoord};
use avatar_core::render::Ray;

/// Sphere-traces the body SDF and returns the first point with `d <= 0`.
pub fn sdf_trace(body: &PosedBody<f64>, ray: &Ray<f64>) -> Option<(f64, SemanticCoord<f64>)> {
    let (near, far) = body.region_bounds(Region::FullBody).intersect_ray(ray.origin, ray.direction)?;
    let mut t = near;
    for _ in 0..4000 {
        let x = ray.at(t);
        let d = body.distance(x);
        if d <= 0.0 {
            return Some((t, body.evaluate(x)));
        }
        t += d.max(1e-5);
        if t > far {
            return None;
        }
    }
    None
}

pub fn sdf_hit(body: &PosedBody<f64>, ray: &Ray<f64>) -> bool {
    sdf_trace(body, ray).is_some()
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
