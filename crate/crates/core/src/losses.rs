//! Auxiliary loss terms with analytic gradients, and their weighted total.

use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::math::Vec3;
use crate::render::{Histogram, RayRecord, RayUpstream};
use crate::scalar::Scalar;

/// Clamp applied to the mask before taking logs.
pub const MASK_EPS: f64 = 1e-4;
/// Denominator offset of the interlevel proposal loss.
pub const PROPOSAL_EPS: f64 = 1e-7;

#[derive(Debug, Error)]
pub enum LossError {
    #[error("empty batch for {0}")]
    EmptyBatch(&'static str),
    #[error("length mismatch: {expected} vs {got}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("histogram domains differ: {0}")]
    DomainMismatch(String),
    #[error("invalid loss weight {name} = {value}")]
    InvalidWeight { name: &'static str, value: f64 },
    #[error("failed to write metrics: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = LossError> = std::result::Result<T, E>;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub sds: f64,
    pub orientation: f64,
    pub proposal: f64,
    pub mask: f64,
    pub normal: f64,
    pub density: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            sds: 1.0,
            orientation: 1.0,
            proposal: 1.0,
            mask: 1.0,
            normal: 1.0,
            density: 1.0,
        }
    }
}

impl LossWeights {
    pub fn zero() -> Self {
        Self {
            sds: 0.0,
            orientation: 0.0,
            proposal: 0.0,
            mask: 0.0,
            normal: 0.0,
            density: 0.0,
        }
    }

    fn named(&self) -> [(&'static str, f64); 6] {
        [
            ("sds", self.sds),
            ("orientation", self.orientation),
            ("proposal", self.proposal),
            ("mask", self.mask),
            ("normal", self.normal),
            ("density", self.density),
        ]
    }

    pub fn validate(&self) -> Result<()> {
        for (name, value) in self.named() {
            if !(value >= 0.0 && value.is_finite()) {
                return Err(LossError::InvalidWeight { name, value });
            }
        }
        Ok(())
    }
}

/// Mean of `|tau_raw - tau_proxy|` over all samples.
pub fn density_loss<T: Scalar>(tau_raw: &[T], tau_proxy: &[T]) -> Result<T> {
    check_len(tau_raw.len(), tau_proxy.len())?;
    if tau_raw.is_empty() {
        return Err(LossError::EmptyBatch("density loss"));
    }
    let sum: T = tau_raw.iter().zip(tau_proxy).map(|(&a, &b)| (a - b).abs()).sum();
    Ok(sum / T::from_usize_lossy(tau_raw.len()))
}

/// Gradients of [`density_loss`] on the raw and proxy densities.
pub fn density_loss_grad<T: Scalar>(tau_raw: &[T], tau_proxy: &[T]) -> Result<(Vec<T>, Vec<T>)> {
    check_len(tau_raw.len(), tau_proxy.len())?;
    if tau_raw.is_empty() {
        return Err(LossError::EmptyBatch("density loss"));
    }
    let inv = T::one() / T::from_usize_lossy(tau_raw.len());
    let d_raw: Vec<T> = tau_raw
        .iter()
        .zip(tau_proxy)
        .map(|(&a, &b)| sign(a - b) * inv)
        .collect();
    let d_proxy = d_raw.iter().map(|&g| -g).collect();
    Ok((d_raw, d_proxy))
}

fn sign<T: Scalar>(x: T) -> T {
    if x > T::zero() {
        T::one()
    } else if x < T::zero() {
        -T::one()
    } else {
        T::zero()
    }
}

fn check_len(expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(LossError::LengthMismatch { expected, got })
    }
}

/// Per-ray loss value with gradients on its sample inputs.
#[derive(Clone, Debug, PartialEq)]
pub struct RayTerm<T> {
    pub value: T,
    pub d_weights: Vec<T>,
    pub d_normals: Vec<Vec3<T>>,
}

/// `sum_i w_i |n'_i - n_i|` for one ray; samples without a density normal are skipped.
pub fn normal_loss_ray<T: Scalar>(
    weights: &[T],
    predicted: &[Vec3<T>],
    density_normals: &[Option<Vec3<T>>],
    squared: bool,
) -> Result<RayTerm<T>> {
    check_len(weights.len(), predicted.len())?;
    check_len(weights.len(), density_normals.len())?;
    let n = weights.len();
    let mut out = RayTerm {
        value: T::zero(),
        d_weights: vec![T::zero(); n],
        d_normals: vec![Vec3::zero(); n],
    };
    for i in 0..n {
        let Some(target) = density_normals[i] else { continue };
        let diff = predicted[i] - target;
        let w = weights[i];
        if squared {
            let e = diff.norm_squared();
            out.value += w * e;
            out.d_weights[i] = e;
            out.d_normals[i] = diff * (T::two() * w);
        } else {
            let e = diff.norm();
            out.value += w * e;
            out.d_weights[i] = e;
            if e > T::zero() {
                out.d_normals[i] = diff * (w / e);
            }
        }
    }
    Ok(out)
}

/// `sum_i w_i max(0, n_i . v)^2` for one ray with view direction `v`.
pub fn orientation_loss_ray<T: Scalar>(weights: &[T], normals: &[Option<Vec3<T>>], view: Vec3<T>) -> Result<RayTerm<T>> {
    check_len(weights.len(), normals.len())?;
    let n = weights.len();
    let mut out = RayTerm {
        value: T::zero(),
        d_weights: vec![T::zero(); n],
        d_normals: vec![Vec3::zero(); n],
    };
    for i in 0..n {
        let Some(normal) = normals[i] else { continue };
        let c = normal.dot(view).max(T::zero());
        out.value += weights[i] * c * c;
        out.d_weights[i] = c * c;
        out.d_normals[i] = view * (T::two() * weights[i] * c);
    }
    Ok(out)
}

/// Interlevel loss of one ray and its gradient on the coarse weights.
///
/// Each fine interval is bounded by the total coarse weight of the bins it
/// overlaps; violations are penalized by `max(0, w - bound)^2 / (w + eps)`.
pub fn proposal_loss_ray<T: Scalar>(coarse: &Histogram<T>, fine: &Histogram<T>) -> Result<(T, Vec<T>)> {
    if !coarse.is_valid() || !fine.is_valid() {
        return Err(LossError::DomainMismatch("histogram edges must be sorted with one more edge than weights".into()));
    }
    let c0 = coarse.edges[0];
    let c1 = coarse.edges[coarse.bins()];
    let tol = (c1 - c0).abs() * T::lit(1e-6);
    let f0 = fine.edges[0];
    let f1 = fine.edges[fine.bins()];
    if f0 < c0 - tol || f1 > c1 + tol {
        return Err(LossError::DomainMismatch(format!(
            "fine [{}, {}] outside coarse [{}, {}]",
            f0.to_f64_lossy(),
            f1.to_f64_lossy(),
            c0.to_f64_lossy(),
            c1.to_f64_lossy()
        )));
    }
    let mut grad = vec![T::zero(); coarse.bins()];
    let mut value = T::zero();
    let eps = T::lit(PROPOSAL_EPS);
    let mut start = 0;
    for k in 0..fine.bins() {
        let (lo, hi) = (fine.edges[k], fine.edges[k + 1]);
        while start < coarse.bins() && coarse.edges[start + 1] <= lo {
            start += 1;
        }
        let mut end = start;
        let mut bound = T::zero();
        while end < coarse.bins() && coarse.edges[end] < hi {
            bound += coarse.weights[end];
            end += 1;
        }
        let w = fine.weights[k];
        let excess = (w - bound).max(T::zero());
        if excess > T::zero() {
            let denom = w + eps;
            value += excess * excess / denom;
            let g = -T::two() * excess / denom;
            for j in start..end {
                grad[j] += g;
            }
        }
    }
    Ok((value, grad))
}

/// Pointwise mask term `min(log M, log(1 - M))` with `M` clamped to `[eps, 1 - eps]`.
pub fn mask_term<T: Scalar>(m: T) -> T {
    let eps = T::lit(MASK_EPS);
    let c = m.max(eps).min(T::one() - eps);
    c.ln().min((T::one() - c).ln())
}

/// Derivative of [`mask_term`]; zero inside the clamp and at `M = 0.5`.
pub fn mask_term_derivative<T: Scalar>(m: T) -> T {
    let eps = T::lit(MASK_EPS);
    if m <= eps || m >= T::one() - eps {
        T::zero()
    } else if m < T::half() {
        T::one() / m
    } else if m > T::half() {
        T::one() / (m - T::one())
    } else {
        T::zero()
    }
}

/// Mean of [`mask_term`] over all pixels.
pub fn mask_loss<T: Scalar>(mask: &[T]) -> Result<T> {
    if mask.is_empty() {
        return Err(LossError::EmptyBatch("mask loss"));
    }
    let sum: T = mask.iter().map(|&m| mask_term(m)).sum();
    Ok(sum / T::from_usize_lossy(mask.len()))
}

/// Gradient of [`mask_loss`].
pub fn mask_loss_grad<T: Scalar>(mask: &[T]) -> Vec<T> {
    let inv = T::one() / T::from_usize_lossy(mask.len().max(1));
    mask.iter().map(|&m| mask_term_derivative(m) * inv).collect()
}

/// Mean over rays of [`normal_loss_ray`].
pub fn normal_loss<T: Scalar>(rays: &[(&[T], &[Vec3<T>], &[Option<Vec3<T>>])], squared: bool) -> Result<T> {
    if rays.is_empty() {
        return Err(LossError::EmptyBatch("normal loss"));
    }
    let mut sum = T::zero();
    for (w, p, n) in rays {
        sum += normal_loss_ray(w, p, n, squared)?.value;
    }
    Ok(sum / T::from_usize_lossy(rays.len()))
}

/// Mean over rays of [`orientation_loss_ray`].
pub fn orientation_loss<T: Scalar>(rays: &[(&[T], &[Option<Vec3<T>>], Vec3<T>)]) -> Result<T> {
    if rays.is_empty() {
        return Err(LossError::EmptyBatch("orientation loss"));
    }
    let mut sum = T::zero();
    for (w, n, v) in rays {
        sum += orientation_loss_ray(w, n, *v)?.value;
    }
    Ok(sum / T::from_usize_lossy(rays.len()))
}

/// Mean over rays of [`proposal_loss_ray`].
pub fn proposal_loss<T: Scalar>(rays: &[(&Histogram<T>, &Histogram<T>)]) -> Result<T> {
    if rays.is_empty() {
        return Err(LossError::EmptyBatch("proposal loss"));
    }
    let mut sum = T::zero();
    for (c, f) in rays {
        sum += proposal_loss_ray(c, f)?.0;
    }
    Ok(sum / T::from_usize_lossy(rays.len()))
}

/// Unweighted values of the scalar loss terms.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub density: f64,
    pub normal: f64,
    pub mask: f64,
    pub orientation: f64,
    pub proposal: f64,
}

/// L2 norms of each weighted term's gradient with respect to its direct inputs.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GradNorms {
    pub sds: f64,
    pub density: f64,
    pub normal: f64,
    pub mask: f64,
    pub orientation: f64,
    pub proposal: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub terms: LossTerms,
    pub total: f64,
    pub grad_norms: GradNorms,
}

/// Weighted sum of the scalar terms. The score-distillation term has no
/// value and only appears through its gradient norm.
pub fn total_loss(terms: &LossTerms, weights: &LossWeights, grad_norms: GradNorms) -> LossBreakdown {
    let total = weights.density * terms.density
        + weights.normal * terms.normal
        + weights.mask * terms.mask
        + weights.orientation * terms.orientation
        + weights.proposal * terms.proposal;
    LossBreakdown {
        terms: *terms,
        total,
        grad_norms,
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossOptions {
    /// Use `|n' - n|^2` in the normal loss.
    pub squared_normal_loss: bool,
}

/// Evaluates every auxiliary term over a batch of rendered rays and adds the
/// weighted gradients into `upstream` (one entry per record).
///
/// Ray and pixel terms are averaged over all records, the density term over
/// all fine samples.
pub fn accumulate_ray_losses<T: Scalar>(
    records: &[RayRecord<T>],
    weights: &LossWeights,
    options: &LossOptions,
    upstream: &mut [RayUpstream<T>],
) -> Result<(LossTerms, GradNorms)> {
    check_len(records.len(), upstream.len())?;
    if records.is_empty() {
        return Err(LossError::EmptyBatch("ray losses"));
    }
    let inv_rays = T::one() / T::from_usize_lossy(records.len());
    let n_samples: usize = records.iter().filter_map(|r| r.samples.as_ref()).map(|s| s.t.len()).sum();
    let inv_samples = T::one() / T::from_usize_lossy(n_samples.max(1));
    let lam = |w: f64| T::lit(w);

    let mut sums = [T::zero(); 5];
    let mut sq = [T::zero(); 5];
    for (r, up) in records.iter().zip(upstream.iter_mut()) {
        let m = mask_term(r.mask);
        sums[2] += m;
        let gm = lam(weights.mask) * mask_term_derivative(r.mask) * inv_rays;
        up.mask += gm;
        sq[2] += gm * gm;

        let Some(s) = &r.samples else { continue };
        check_len(s.t.len(), up.weights.len())?;
        check_len(s.coarse.bins(), up.coarse_weights.len())?;

        for k in 0..s.t.len() {
            let diff = s.tau_raw[k] - s.tau_proxy[k];
            sums[0] += diff.abs();
            let g = lam(weights.density) * sign(diff) * inv_samples;
            up.tau_raw[k] += g;
            up.tau_proxy[k] -= g;
            sq[0] += T::two() * g * g;
        }

        let nl = normal_loss_ray(&s.weights, &s.normal_pred, &s.density_normals, options.squared_normal_loss)?;
        sums[1] += nl.value;
        let scale = lam(weights.normal) * inv_rays;
        for k in 0..s.t.len() {
            let gw = nl.d_weights[k] * scale;
            let gn = nl.d_normals[k] * scale;
            up.weights[k] += gw;
            up.normal_pred[k] += gn;
            sq[1] += gw * gw + gn.norm_squared();
        }

        let ol = orientation_loss_ray(&s.weights, &s.density_normals, r.ray.direction)?;
        sums[3] += ol.value;
        let scale = lam(weights.orientation) * inv_rays;
        for k in 0..s.t.len() {
            let gw = ol.d_weights[k] * scale;
            up.weights[k] += gw;
            sq[3] += gw * gw;
        }

        let (pv, pg) = proposal_loss_ray(&s.coarse, &s.fine_histogram())?;
        sums[4] += pv;
        let scale = lam(weights.proposal) * inv_rays;
        for (u, g) in up.coarse_weights.iter_mut().zip(&pg) {
            *u += *g * scale;
            sq[4] += *g * scale * *g * scale;
        }
    }
    let terms = LossTerms {
        density: (sums[0] * inv_samples).to_f64_lossy(),
        normal: (sums[1] * inv_rays).to_f64_lossy(),
        mask: (sums[2] * inv_rays).to_f64_lossy(),
        orientation: (sums[3] * inv_rays).to_f64_lossy(),
        proposal: (sums[4] * inv_rays).to_f64_lossy(),
    };
    if n_samples == 0 {
        // no sample-level terms without samples
        sq[0] = T::zero();
    }
    let norms = GradNorms {
        sds: 0.0,
        density: sq[0].sqrt().to_f64_lossy(),
        normal: sq[1].sqrt().to_f64_lossy(),
        mask: sq[2].sqrt().to_f64_lossy(),
        orientation: sq[3].sqrt().to_f64_lossy(),
        proposal: sq[4].sqrt().to_f64_lossy(),
    };
    Ok((terms, norms))
}

/// One JSON-lines metrics record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: u64,
    #[serde(flatten)]
    pub terms: LossTerms,
    pub total: f64,
    pub grad_norms: GradNorms,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub region: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prompt: Option<String>,
    #[serde(default)]
    pub skipped: bool,
}

impl MetricsRecord {
    pub fn new(step: u64, breakdown: &LossBreakdown) -> Self {
        Self {
            step,
            terms: breakdown.terms,
            total: breakdown.total,
            grad_norms: breakdown.grad_norms,
            region: None,
            prompt: None,
            skipped: false,
        }
    }

    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("metrics serialize")
    }
}

/// Appends one record per line.
pub struct MetricsWriter<W: Write> {
    out: W,
}

impl<W: Write> MetricsWriter<W> {
    pub fn new(out: W) -> Self {
        Self { out }
    }

    pub fn write(&mut self, record: &MetricsRecord) -> Result<()> {
        writeln!(self.out, "{}", record.to_json_line())?;
        self.out.flush()?;
        Ok(())
    }

    pub fn into_inner(self) -> W {
        self.out
    }
}
