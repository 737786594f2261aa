//! Conditioned MLP mapping semantic coordinates to albedo, density and normals.
//!
//! Parameters live in one flat vector; [`Layout`] records where each dense
//! layer sits. Evaluation goes through a [`FieldEvaluator`], which folds the
//! pose and shape conditioning into the first trunk layer's bias once so
//! per-sample cost depends only on the semantic inputs.

mod encoding;
mod eval;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::body::SHAPE_DIM;
use crate::scalar::{softplus_inverse, Scalar};

pub use encoding::{encode, encode_backward, encoded_width, SEMANTIC_INPUTS};
pub use eval::{
    field_eval_batch_with_param_grads, FieldEvaluator, FieldGradAccum, FieldGradients, FieldInput,
    FieldOutput, FieldOutputGrad, FieldTape, ProposalTape,
};

/// Raw density the field emits at initialization.
pub const INIT_DENSITY: f64 = 0.01;

#[derive(Debug, thiserror::Error)]
pub enum FieldError {
    #[error("invalid architecture: {0}")]
    InvalidArch(String),
    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: usize, got: usize },
    #[error("pose has {got} joints but the field was built for {expected}")]
    JointMismatch { expected: usize, got: usize },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FieldArch {
    pub width: usize,
    pub layers: usize,
    pub bands: usize,
    pub cond_dim: usize,
    pub proposal_width: usize,
    pub proposal_layers: usize,
    /// Joint count of the skeleton the conditioning projection expects.
    pub joints: usize,
}

impl Default for FieldArch {
    fn default() -> Self {
        Self {
            width: 64,
            layers: 4,
            bands: 6,
            cond_dim: 16,
            proposal_width: 32,
            proposal_layers: 2,
            joints: 16,
        }
    }
}

impl FieldArch {
    pub fn validate(&self) -> Result<(), FieldError> {
        let bad = |m: &str| Err(FieldError::InvalidArch(m.into()));
        if self.width == 0 || self.layers == 0 {
            return bad("trunk width and depth must be >= 1");
        }
        if self.proposal_width == 0 || self.proposal_layers == 0 {
            return bad("proposal width and depth must be >= 1");
        }
        if self.joints == 0 {
            return bad("joint count must be >= 1");
        }
        if self.bands > 16 {
            return bad("at most 16 frequency bands");
        }
        if self.width > 4096 || self.proposal_width > 4096 || self.layers > 64 {
            return bad("network too large");
        }
        Ok(())
    }

    pub fn conditioning_inputs(&self) -> usize {
        3 * (self.joints - 1) + SHAPE_DIM
    }

    pub fn param_count(&self) -> usize {
        Layout::new(self).total
    }
}

/// One fully connected layer inside the flat parameter vector.
///
/// Weights are row-major `outputs x inputs`, followed by the bias.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Dense {
    pub offset: usize,
    pub inputs: usize,
    pub outputs: usize,
}

impl Dense {
    pub fn weights(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.inputs * self.outputs
    }

    pub fn bias(&self) -> std::ops::Range<usize> {
        let w = self.offset + self.inputs * self.outputs;
        w..w + self.outputs
    }

    pub fn len(&self) -> usize {
        (self.inputs + 1) * self.outputs
    }

    pub fn is_empty(&self) -> bool {
        self.outputs == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Layout {
    pub encoded: usize,
    pub conditioning: Dense,
    pub trunk: Vec<Dense>,
    pub albedo_normal: Dense,
    pub density: Dense,
    pub proposal: Vec<Dense>,
    pub proposal_out: Dense,
    pub total: usize,
}

impl Layout {
    pub fn new(arch: &FieldArch) -> Self {
        let mut offset = 0;
        let mut dense = |inputs: usize, outputs: usize| {
            let d = Dense { offset, inputs, outputs };
            offset += d.len();
            d
        };
        let encoded = encoded_width(arch.bands);
        let conditioning = dense(arch.conditioning_inputs(), arch.cond_dim);
        let trunk = (0..arch.layers)
            .map(|i| {
                let inputs = if i == 0 { encoded + arch.cond_dim } else { arch.width };
                dense(inputs, arch.width)
            })
            .collect();
        let albedo_normal = dense(arch.width, 6);
        let density = dense(arch.width, 1);
        let proposal = (0..arch.proposal_layers)
            .map(|i| {
                let inputs = if i == 0 { encoded } else { arch.proposal_width };
                dense(inputs, arch.proposal_width)
            })
            .collect();
        let proposal_out = dense(arch.proposal_width, 1);
        Self {
            encoded,
            conditioning,
            trunk,
            albedo_normal,
            density,
            proposal,
            proposal_out,
            total: offset,
        }
    }

    /// Named parameter groups in declaration order.
    pub fn groups(&self) -> Vec<(String, Dense)> {
        let mut out = vec![("conditioning".to_string(), self.conditioning)];
        for (i, d) in self.trunk.iter().enumerate() {
            out.push((format!("trunk.{i}"), *d));
        }
        out.push(("albedo_normal_head".into(), self.albedo_normal));
        out.push(("density_head".into(), self.density));
        for (i, d) in self.proposal.iter().enumerate() {
            out.push((format!("proposal.{i}"), *d));
        }
        out.push(("proposal_out".into(), self.proposal_out));
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FieldParams<T> {
    arch: FieldArch,
    layout: Layout,
    pub values: Vec<T>,
}

impl<T: Scalar> FieldParams<T> {
    /// Fan-in scaled uniform initialization.
    pub fn init(seed: u64, arch: &FieldArch) -> Result<Self, FieldError> {
        arch.validate()?;
        let layout = Layout::new(arch);
        let mut values = vec![T::zero(); layout.total];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut fill = |d: &Dense, gain: f64, bias: f64, values: &mut [T]| {
            let bound = gain / (d.inputs as f64).sqrt();
            for v in &mut values[d.weights()] {
                *v = T::lit(rng.gen_range(-bound..=bound));
            }
            for v in &mut values[d.bias()] {
                *v = T::lit(bias);
            }
        };
        let relu_gain = 6f64.sqrt();
        let tau0 = softplus_inverse(INIT_DENSITY);
        fill(&layout.conditioning, 1.0, 0.0, &mut values);
        for d in &layout.trunk {
            fill(d, relu_gain, 0.0, &mut values);
        }
        fill(&layout.albedo_normal, 1.0, 0.0, &mut values);
        fill(&layout.density, 0.1, tau0, &mut values);
        for d in &layout.proposal {
            fill(d, relu_gain, 0.0, &mut values);
        }
        fill(&layout.proposal_out, 0.1, tau0, &mut values);
        Ok(Self {
            arch: arch.clone(),
            layout,
            values,
        })
    }

    /// Wraps an existing flat vector, checking its length against the layout.
    pub fn from_values(arch: &FieldArch, values: Vec<T>) -> Result<Self, FieldError> {
        arch.validate()?;
        let layout = Layout::new(arch);
        if values.len() != layout.total {
            return Err(FieldError::ShapeMismatch {
                expected: layout.total,
                got: values.len(),
            });
        }
        Ok(Self {
            arch: arch.clone(),
            layout,
            values,
        })
    }

    pub fn arch(&self) -> &FieldArch {
        &self.arch
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn cast<U: Scalar>(&self) -> FieldParams<U> {
        FieldParams {
            arch: self.arch.clone(),
            layout: self.layout.clone(),
            values: self.values.iter().map(|v| U::lit(v.to_f64_lossy())).collect(),
        }
    }
}

/// Final density: the larger of the field's raw density and the body proxy.
pub fn composite_density<T: Scalar>(raw: T, proxy: T) -> T {
    if raw >= proxy {
        raw
    } else {
        proxy
    }
}

/// Subgradient of [`composite_density`] as `(d/d raw, d/d proxy)`; ties go to `raw`.
pub fn composite_density_grad<T: Scalar>(raw: T, proxy: T) -> (T, T) {
    if raw >= proxy {
        (T::one(), T::zero())
    } else {
        (T::zero(), T::one())
    }
}
