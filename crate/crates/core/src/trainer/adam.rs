//! Bias-corrected Adam over flat parameter groups.

use serde::{Deserialize, Serialize};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

/// First and second moments plus the group's own step count.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamMoments {
    pub t: u64,
    pub m: Vec<f32>,
    pub v: Vec<f32>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AdamOutcome {
    Updated,
    /// The gradient held a non-finite value; nothing changed.
    Skipped,
}

impl AdamMoments {
    pub fn zeros(len: usize) -> Self {
        Self {
            t: 0,
            m: vec![0.0; len],
            v: vec![0.0; len],
        }
    }

    pub fn len(&self) -> usize {
        self.m.len()
    }

    pub fn is_empty(&self) -> bool {
        self.m.is_empty()
    }

    /// One Adam step on `params` in place.
    ///
    /// # Panics
    /// If `params`, `grads` and the moments differ in length.
    pub fn update(&mut self, params: &mut [f32], grads: &[f32], lr: f64) -> AdamOutcome {
        assert_eq!(params.len(), grads.len(), "parameter/gradient length mismatch");
        assert_eq!(params.len(), self.m.len(), "parameter/moment length mismatch");
        if grads.iter().any(|g| !g.is_finite()) {
            return AdamOutcome::Skipped;
        }
        self.t += 1;
        let t = self.t as i32;
        let c1 = 1.0 - BETA1.powi(t);
        let c2 = 1.0 - BETA2.powi(t);
        for ((p, &g), (m, v)) in params.iter_mut().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            let g = g as f64;
            let mn = BETA1 * *m as f64 + (1.0 - BETA1) * g;
            let vn = BETA2 * *v as f64 + (1.0 - BETA2) * g * g;
            *m = mn as f32;
            *v = vn as f32;
            let step = lr * (mn / c1) / ((vn / c2).sqrt() + EPSILON);
            *p = (*p as f64 - step) as f32;
        }
        AdamOutcome::Updated
    }
}
