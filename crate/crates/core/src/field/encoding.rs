//! Frequency encoding of the semantic tuple `(d, s)`.

use crate::scalar::Scalar;

/// Number of raw inputs: signed distance plus a 3D semantic code.
pub const SEMANTIC_INPUTS: usize = 4;

pub fn encoded_width(bands: usize) -> usize {
    SEMANTIC_INPUTS * (1 + 2 * bands)
}

/// Writes `[u, sin(2^k pi u), cos(2^k pi u)]` for `k < bands` into `out`.
///
/// Layout: the raw inputs first, then for each band the four sines followed by
/// the four cosines. Higher bands use the double-angle recurrence.
pub fn encode<T: Scalar>(u: &[T; SEMANTIC_INPUTS], bands: usize, out: &mut [T]) {
    debug_assert_eq!(out.len(), encoded_width(bands));
    out[..SEMANTIC_INPUTS].copy_from_slice(u);
    if bands == 0 {
        return;
    }
    let mut sin = [T::zero(); SEMANTIC_INPUTS];
    let mut cos = [T::zero(); SEMANTIC_INPUTS];
    for i in 0..SEMANTIC_INPUTS {
        let (s, c) = (u[i] * T::PI()).sin_cos();
        sin[i] = s;
        cos[i] = c;
    }
    for k in 0..bands {
        let base = SEMANTIC_INPUTS * (1 + 2 * k);
        out[base..base + SEMANTIC_INPUTS].copy_from_slice(&sin);
        out[base + SEMANTIC_INPUTS..base + 2 * SEMANTIC_INPUTS].copy_from_slice(&cos);
        for i in 0..SEMANTIC_INPUTS {
            let (s, c) = (sin[i], cos[i]);
            sin[i] = T::two() * s * c;
            cos[i] = c * c - s * s;
        }
    }
}

/// Accumulates `d(encoding)/du^T * grad` given the forward encoding values.
pub fn encode_backward<T: Scalar>(
    encoded: &[T],
    grad: &[T],
    bands: usize,
) -> [T; SEMANTIC_INPUTS] {
    let mut du = [T::zero(); SEMANTIC_INPUTS];
    du.copy_from_slice(&grad[..SEMANTIC_INPUTS]);
    let mut freq = T::PI();
    for k in 0..bands {
        let base = SEMANTIC_INPUTS * (1 + 2 * k);
        for i in 0..SEMANTIC_INPUTS {
            let s = encoded[base + i];
            let c = encoded[base + SEMANTIC_INPUTS + i];
            du[i] += freq * (c * grad[base + i] - s * grad[base + SEMANTIC_INPUTS + i]);
        }
        freq = freq * T::two();
    }
    du
}
