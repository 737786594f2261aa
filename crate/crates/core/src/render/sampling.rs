//! Coarse proposal histograms and inverse-transform resampling.

use rand::Rng;

use super::composite::composite_weights;
use crate::scalar::Scalar;

/// Fraction of the histogram mass spread uniformly before inversion, so every
/// bin keeps a nonzero sampling density.
pub const PDF_FLOOR: f64 = 0.01;

/// Piecewise-constant weights over sorted bin edges (`edges.len() == weights.len() + 1`).
#[derive(Clone, Debug, PartialEq)]
pub struct Histogram<T> {
    pub edges: Vec<T>,
    pub weights: Vec<T>,
}

impl<T: Scalar> Histogram<T> {
    pub fn bins(&self) -> usize {
        self.weights.len()
    }

    pub fn is_valid(&self) -> bool {
        self.edges.len() == self.weights.len() + 1
            && self.edges.windows(2).all(|w| w[0] < w[1])
            && self.weights.iter().all(|&w| w >= T::zero())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Resampled<T> {
    /// `n_fine + 1` strictly increasing interval edges.
    pub edges: Vec<T>,
    /// Set when the histogram carried no mass and stratified edges were used.
    pub fallback: bool,
}

/// Draws `n_fine + 1` edges by inverting the normalized histogram CDF.
///
/// Quantiles are stratified; `rng` jitters them inside their strata, otherwise
/// stratum centers are used.
pub fn resample<T: Scalar, R: Rng>(hist: &Histogram<T>, n_fine: usize, mut rng: Option<&mut R>) -> Resampled<T> {
    let n = hist.bins();
    let total: T = hist.weights.iter().copied().sum();
    let fallback = !(total > T::lit(1e-12)) || !total.is_finite();
    let floor = T::lit(PDF_FLOOR) * total / T::from_usize_lossy(n);
    let mut cdf = Vec::with_capacity(n + 1);
    cdf.push(T::zero());
    let mut acc = T::zero();
    for &w in &hist.weights {
        acc += if fallback { T::one() } else { w + floor };
        cdf.push(acc);
    }
    for c in cdf.iter_mut() {
        *c = *c / acc;
    }
    let near = hist.edges[0];
    let far = hist.edges[n];
    let count = n_fine + 1;
    let mut edges = Vec::with_capacity(count);
    let mut bin = 0;
    for k in 0..count {
        let xi = match rng.as_deref_mut() {
            Some(r) => T::lit(r.gen::<f64>()),
            None => T::half(),
        };
        let u = (T::from_usize_lossy(k) + xi) / T::from_usize_lossy(count);
        while bin + 1 < n && cdf[bin + 1] <= u {
            bin += 1;
        }
        let span = cdf[bin + 1] - cdf[bin];
        let frac = if span > T::zero() {
            ((u - cdf[bin]) / span).max(T::zero()).min(T::one())
        } else {
            T::zero()
        };
        edges.push(hist.edges[bin] + (hist.edges[bin + 1] - hist.edges[bin]) * frac);
    }
    let ulps = far.abs().max(near.abs()).max(T::one()) * T::epsilon() * T::lit(4.0);
    let min_gap = ((far - near) * T::lit(1e-6)).max(ulps);
    for k in 1..count {
        if edges[k] < edges[k - 1] + min_gap {
            edges[k] = edges[k - 1] + min_gap;
        }
    }
    for k in (0..count).rev() {
        let cap = if k + 1 == count { far } else { edges[k + 1] - min_gap };
        if edges[k] > cap {
            edges[k] = cap;
        }
    }
    Resampled { edges, fallback }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProposalSamples<T> {
    pub coarse: Histogram<T>,
    /// Proposal density per coarse bin.
    pub coarse_density: Vec<T>,
    pub fine_edges: Vec<T>,
    pub fallback: bool,
}

/// Uniform coarse bins over `[near, far]`, each evaluated at its far edge so
/// a bin is opaque exactly when the ray has entered the body by its end.
pub fn coarse_edges<T: Scalar>(near: T, far: T, n_coarse: usize) -> Vec<T> {
    let step = (far - near) / T::from_usize_lossy(n_coarse);
    (0..=n_coarse)
        .map(|i| if i == n_coarse { far } else { near + step * T::from_usize_lossy(i) })
        .collect()
}

/// Evaluates `density` on coarse bins, composites them into a weight
/// histogram and resamples fine intervals from it, dilated one bin forward.
pub fn propose_and_resample<T: Scalar, F: FnMut(T) -> T, R: Rng>(
    near: T,
    far: T,
    n_coarse: usize,
    n_fine: usize,
    mut density: F,
    rng: Option<&mut R>,
) -> ProposalSamples<T> {
    assert!(n_coarse >= 1 && n_fine >= 1, "sample counts must be >= 1");
    assert!(near < far, "near must be below far");
    let edges = coarse_edges(near, far, n_coarse);
    let coarse_density: Vec<T> = edges[1..].iter().map(|&t| density(t)).collect();
    let delta: Vec<T> = edges.windows(2).map(|w| w[1] - w[0]).collect();
    let weights = composite_weights(&coarse_density, &delta);
    let coarse = Histogram { edges, weights };
    // The density rises right after the far edge of the first opaque bin, so
    // each bin's mass also covers the bin behind it.
    let dilated = Histogram {
        edges: coarse.edges.clone(),
        weights: (0..n_coarse)
            .map(|j| if j == 0 { coarse.weights[0] } else { coarse.weights[j].max(coarse.weights[j - 1]) })
            .collect(),
    };
    let fine = resample(&dilated, n_fine, rng);
    ProposalSamples {
        coarse,
        coarse_density,
        fine_edges: fine.edges,
        fallback: fine.fallback,
    }
}
