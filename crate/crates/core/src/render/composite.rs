//! Front-to-back alpha compositing and its exact reverse pass.

use super::RenderError;
use crate::math::Vec3;
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq)]
pub struct Composite<T> {
    pub color: Vec3<T>,
    pub weights: Vec<T>,
    /// Accumulated opacity, the sum of the weights.
    pub mask: T,
}

/// Opacity weights only: `w_i = alpha_i * prod_{j<i} (1 - alpha_j)`.
pub fn composite_weights<T: Scalar>(tau: &[T], delta: &[T]) -> Vec<T> {
    let mut weights = Vec::with_capacity(tau.len());
    let mut transmittance = T::one();
    for (&t, &d) in tau.iter().zip(delta) {
        let x = t * d;
        let alpha = -(-x).exp_m1();
        weights.push(transmittance * alpha);
        transmittance = transmittance * (-x).exp();
    }
    weights
}

/// Composites colors with no background term.
pub fn composite<T: Scalar>(colors: &[Vec3<T>], tau: &[T], delta: &[T]) -> Composite<T> {
    let weights = composite_weights(tau, delta);
    let mut color = Vec3::zero();
    let mut mask = T::zero();
    for (w, c) in weights.iter().zip(colors) {
        color += *c * *w;
        mask += *w;
    }
    Composite { color, weights, mask }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CompositeGrad<T> {
    pub colors: Vec<Vec3<T>>,
    pub tau: Vec<T>,
}

/// Reverse pass of [`composite`].
///
/// `d_weights`, when given, adds a direct upstream gradient on each weight.
pub fn composite_backward<T: Scalar>(
    colors: &[Vec3<T>],
    tau: &[T],
    delta: &[T],
    d_color: Vec3<T>,
    d_mask: T,
    d_weights: Option<&[T]>,
) -> Result<CompositeGrad<T>, RenderError> {
    let n = tau.len();
    if colors.len() != n || delta.len() != n || d_weights.is_some_and(|w| w.len() != n) {
        return Err(RenderError::ShapeMismatch(format!(
            "colors {}, tau {n}, delta {}, weight grads {:?}",
            colors.len(),
            delta.len(),
            d_weights.map(<[T]>::len)
        )));
    }
    let weights = composite_weights(tau, delta);
    // dL/dw_i for every sample.
    let g: Vec<T> = (0..n)
        .map(|i| d_color.dot(colors[i]) + d_mask + d_weights.map_or(T::zero(), |w| w[i]))
        .collect();
    // transmittance after sample i, T_{i+1}
    let mut after = Vec::with_capacity(n);
    let mut trans = T::one();
    for i in 0..n {
        trans = trans * (-(tau[i] * delta[i])).exp();
        after.push(trans);
    }
    let mut d_tau = vec![T::zero(); n];
    let mut suffix = T::zero();
    for i in (0..n).rev() {
        d_tau[i] = delta[i] * (g[i] * after[i] - suffix);
        suffix += g[i] * weights[i];
    }
    Ok(CompositeGrad {
        colors: weights.iter().map(|&w| d_color * w).collect(),
        tau: d_tau,
    })
}
