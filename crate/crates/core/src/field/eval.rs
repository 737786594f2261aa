//! Forward evaluation and reverse-mode gradients of the field MLPs.

use super::encoding::{encode, encode_backward, SEMANTIC_INPUTS};
use super::{Dense, FieldError, FieldParams};
use crate::body::{Pose, SemanticCoord, Shape, SHAPE_DIM};
use crate::math::Vec3;
use crate::scalar::{sigmoid, softplus, Scalar};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FieldOutput<T> {
    pub albedo: Vec3<T>,
    pub density: T,
    pub normal: Vec3<T>,
}

/// Upstream gradients with respect to each field output.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FieldOutputGrad<T> {
    pub albedo: Vec3<T>,
    pub density: T,
    pub normal: Vec3<T>,
    /// Gradient on the proposal head's density.
    pub proposal: T,
}

impl<T: Scalar> Default for FieldOutputGrad<T> {
    fn default() -> Self {
        Self {
            albedo: Vec3::zero(),
            density: T::zero(),
            normal: Vec3::zero(),
            proposal: T::zero(),
        }
    }
}

impl<T: Scalar> FieldOutputGrad<T> {
    fn touches_main(&self) -> bool {
        let z = T::zero();
        self.albedo != Vec3::zero() || self.density != z || self.normal != Vec3::zero()
    }
}

#[inline]
pub(crate) fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [T::zero(); 8];
    let mut ca = a.chunks_exact(8);
    let mut cb = b.chunks_exact(8);
    for (x, y) in (&mut ca).zip(&mut cb) {
        for k in 0..8 {
            acc[k] += x[k] * y[k];
        }
    }
    let mut tail = T::zero();
    for (x, y) in ca.remainder().iter().zip(cb.remainder()) {
        tail += *x * *y;
    }
    (acc[0] + acc[4]) + (acc[1] + acc[5]) + (acc[2] + acc[6]) + (acc[3] + acc[7]) + tail
}

#[inline]
fn axpy<T: Scalar>(alpha: T, x: &[T], y: &mut [T]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * *xi;
    }
}

/// `out = W x + b` using only the first `x.len()` input columns.
fn dense_forward<T: Scalar>(values: &[T], d: &Dense, bias: &[T], x: &[T], out: &mut [T]) {
    let w = &values[d.weights()];
    for (o, y) in out.iter_mut().enumerate() {
        let row = &w[o * d.inputs..o * d.inputs + x.len()];
        *y = bias[o] + dot(row, x);
    }
}

/// Accumulates weight and bias gradients and optionally writes `W^T dy` into `dx`.
fn dense_backward<T: Scalar>(
    values: &[T],
    grads: &mut [T],
    d: &Dense,
    x: &[T],
    dy: &[T],
    dx: Option<&mut [T]>,
) {
    let w = &values[d.weights()];
    {
        let gw = &mut grads[d.weights()];
        for (o, &g) in dy.iter().enumerate() {
            if g != T::zero() {
                axpy(g, x, &mut gw[o * d.inputs..o * d.inputs + x.len()]);
            }
        }
    }
    for (gb, &g) in grads[d.bias()].iter_mut().zip(dy) {
        *gb += g;
    }
    if let Some(dx) = dx {
        dx.iter_mut().for_each(|v| *v = T::zero());
        for (o, &g) in dy.iter().enumerate() {
            if g != T::zero() {
                axpy(g, &w[o * d.inputs..o * d.inputs + dx.len()], dx);
            }
        }
    }
}

fn relu_in_place<T: Scalar>(v: &mut [T]) {
    for x in v {
        if !(*x > T::zero()) {
            *x = T::zero();
        }
    }
}

fn semantic_inputs<T: Scalar>(c: &SemanticCoord<T>) -> [T; SEMANTIC_INPUTS] {
    [c.d, c.s.x, c.s.y, c.s.z]
}

/// Intermediate values of one trunk evaluation, kept for the backward pass.
#[derive(Clone, Debug)]
pub struct FieldTape<T> {
    encoded: Vec<T>,
    /// Post-activation hidden states, `layers * width`.
    hidden: Vec<T>,
    normal_raw: Vec3<T>,
    density_pre: T,
    pub output: FieldOutput<T>,
}

#[derive(Clone, Debug)]
pub struct ProposalTape<T> {
    encoded: Vec<T>,
    hidden: Vec<T>,
    pre: T,
    pub density: T,
}

/// The field specialized to one pose and shape.
#[derive(Clone, Debug)]
pub struct FieldEvaluator<'a, T> {
    params: &'a FieldParams<T>,
    cond_input: Vec<T>,
    cond: Vec<T>,
    /// First trunk bias with the conditioning contribution folded in.
    bias0: Vec<T>,
}

impl<T: Scalar> FieldParams<T> {
    pub fn evaluator(&self, pose: &Pose<T>, shape: &Shape<T>) -> Result<FieldEvaluator<'_, T>, FieldError> {
        if pose.joint_count() != self.arch().joints {
            return Err(FieldError::JointMismatch {
                expected: self.arch().joints,
                got: pose.joint_count(),
            });
        }
        let layout = self.layout();
        let cond_input: Vec<T> = pose.articulation().chain(shape.beta.iter().copied()).collect();
        let mut cond = vec![T::zero(); layout.conditioning.outputs];
        let cd = &layout.conditioning;
        dense_forward(&self.values, cd, &self.values[cd.bias()], &cond_input, &mut cond);
        let t0 = &layout.trunk[0];
        let w = &self.values[t0.weights()];
        let b = &self.values[t0.bias()];
        let bias0 = (0..t0.outputs)
            .map(|o| {
                let row = &w[o * t0.inputs + layout.encoded..(o + 1) * t0.inputs];
                b[o] + dot(row, &cond)
            })
            .collect();
        Ok(FieldEvaluator {
            params: self,
            cond_input,
            cond,
            bias0,
        })
    }

    /// Evaluates the field at a single coordinate.
    pub fn eval(&self, coord: &SemanticCoord<T>, pose: &Pose<T>, shape: &Shape<T>) -> Result<FieldOutput<T>, FieldError> {
        Ok(self.evaluator(pose, shape)?.eval(coord))
    }
}

impl<'a, T: Scalar> FieldEvaluator<'a, T> {
    pub fn params(&self) -> &'a FieldParams<T> {
        self.params
    }

    /// Projected conditioning vector.
    pub fn conditioning(&self) -> &[T] {
        &self.cond
    }

    fn trunk(&self, coord: &SemanticCoord<T>, encoded: &mut [T], hidden: &mut [T]) {
        let p = self.params;
        let layout = p.layout();
        let width = p.arch().width;
        encode(&semantic_inputs(coord), p.arch().bands, encoded);
        for (i, d) in layout.trunk.iter().enumerate() {
            let (prev, cur) = hidden.split_at_mut(i * width);
            let out = &mut cur[..width];
            if i == 0 {
                dense_forward(&p.values, d, &self.bias0, encoded, out);
            } else {
                let x = &prev[(i - 1) * width..];
                dense_forward(&p.values, d, &p.values[d.bias()], x, out);
            }
            relu_in_place(out);
        }
    }

    fn heads(&self, last: &[T], with_albedo: bool) -> (Vec3<T>, Vec3<T>, T) {
        let p = self.params;
        let layout = p.layout();
        let dd = &layout.density;
        let mut pre = [T::zero()];
        dense_forward(&p.values, dd, &p.values[dd.bias()], last, &mut pre);
        if !with_albedo {
            return (Vec3::zero(), Vec3::zero(), pre[0]);
        }
        let an = &layout.albedo_normal;
        let mut raw = [T::zero(); 6];
        dense_forward(&p.values, an, &p.values[an.bias()], last, &mut raw);
        (Vec3::new(raw[0], raw[1], raw[2]), Vec3::new(raw[3], raw[4], raw[5]), pre[0])
    }

    fn finish(albedo_pre: Vec3<T>, normal_raw: Vec3<T>, density_pre: T) -> FieldOutput<T> {
        let len = normal_raw.norm();
        let normal = if len > T::lit(1e-12) {
            normal_raw / len
        } else {
            Vec3::new(T::zero(), T::zero(), T::one())
        };
        FieldOutput {
            albedo: Vec3::new(sigmoid(albedo_pre.x), sigmoid(albedo_pre.y), sigmoid(albedo_pre.z)),
            density: softplus(density_pre),
            normal,
        }
    }

    pub fn eval(&self, coord: &SemanticCoord<T>) -> FieldOutput<T> {
        self.forward(coord).output
    }

    /// Raw density only, skipping the albedo and normal head.
    pub fn density(&self, coord: &SemanticCoord<T>) -> T {
        let arch = self.params.arch();
        let mut encoded = vec![T::zero(); self.params.layout().encoded];
        let mut hidden = vec![T::zero(); arch.width * arch.layers];
        self.trunk(coord, &mut encoded, &mut hidden);
        let (_, _, pre) = self.heads(&hidden[(arch.layers - 1) * arch.width..], false);
        softplus(pre)
    }

    pub fn forward(&self, coord: &SemanticCoord<T>) -> FieldTape<T> {
        let arch = self.params.arch();
        let mut encoded = vec![T::zero(); self.params.layout().encoded];
        let mut hidden = vec![T::zero(); arch.width * arch.layers];
        self.trunk(coord, &mut encoded, &mut hidden);
        let (albedo_pre, normal_raw, density_pre) =
            self.heads(&hidden[(arch.layers - 1) * arch.width..], true);
        FieldTape {
            encoded,
            hidden,
            normal_raw,
            density_pre,
            output: Self::finish(albedo_pre, normal_raw, density_pre),
        }
    }

    /// Reverse pass for one sample. Returns the gradient on `(d, s)`.
    pub fn backward(
        &self,
        tape: &FieldTape<T>,
        grad: &FieldOutputGrad<T>,
        acc: &mut FieldGradAccum<T>,
    ) -> [T; SEMANTIC_INPUTS] {
        let p = self.params;
        let layout = p.layout();
        let arch = p.arch();
        let width = arch.width;
        let out = &tape.output;

        let c = out.albedo;
        let mut dan = [T::zero(); 6];
        for k in 0..3 {
            dan[k] = grad.albedo[k] * c[k] * (T::one() - c[k]);
        }
        let len = tape.normal_raw.norm();
        if len > T::lit(1e-12) {
            let n = out.normal;
            let g = grad.normal;
            let dr = (g - n * n.dot(g)) / len;
            dan[3] = dr.x;
            dan[4] = dr.y;
            dan[5] = dr.z;
        }
        let ddens = [grad.density * sigmoid(tape.density_pre)];

        let last = &tape.hidden[(arch.layers - 1) * width..];
        let mut dh = vec![T::zero(); width];
        let mut tmp = vec![T::zero(); width];
        dense_backward(&p.values, &mut acc.params, &layout.albedo_normal, last, &dan, Some(&mut dh));
        dense_backward(&p.values, &mut acc.params, &layout.density, last, &ddens, Some(&mut tmp));
        for (a, b) in dh.iter_mut().zip(&tmp) {
            *a += *b;
        }

        let mut denc = vec![T::zero(); layout.encoded];
        for i in (0..arch.layers).rev() {
            let h = &tape.hidden[i * width..(i + 1) * width];
            for (g, &v) in dh.iter_mut().zip(h) {
                if !(v > T::zero()) {
                    *g = T::zero();
                }
            }
            let d = &layout.trunk[i];
            if i == 0 {
                dense_backward(&p.values, &mut acc.params, d, &tape.encoded, &dh, Some(&mut denc));
                for (s, &g) in acc.first_layer.iter_mut().zip(&dh) {
                    *s += g;
                }
            } else {
                let x = &tape.hidden[(i - 1) * width..i * width];
                dense_backward(&p.values, &mut acc.params, d, x, &dh, Some(&mut tmp));
                std::mem::swap(&mut dh, &mut tmp);
            }
        }
        encode_backward(&tape.encoded, &denc, arch.bands)
    }

    pub fn proposal_density(&self, coord: &SemanticCoord<T>) -> T {
        self.proposal_forward(coord).density
    }

    pub fn proposal_forward(&self, coord: &SemanticCoord<T>) -> ProposalTape<T> {
        let p = self.params;
        let layout = p.layout();
        let pw = p.arch().proposal_width;
        let mut encoded = vec![T::zero(); layout.encoded];
        encode(&semantic_inputs(coord), p.arch().bands, &mut encoded);
        let mut hidden = vec![T::zero(); pw * layout.proposal.len()];
        for (i, d) in layout.proposal.iter().enumerate() {
            let (prev, cur) = hidden.split_at_mut(i * pw);
            let out = &mut cur[..pw];
            let x = if i == 0 { &encoded[..] } else { &prev[(i - 1) * pw..] };
            dense_forward(&p.values, d, &p.values[d.bias()], x, out);
            relu_in_place(out);
        }
        let po = &layout.proposal_out;
        let mut pre = [T::zero()];
        dense_forward(&p.values, po, &p.values[po.bias()], &hidden[hidden.len() - pw..], &mut pre);
        ProposalTape {
            encoded,
            hidden,
            pre: pre[0],
            density: softplus(pre[0]),
        }
    }

    /// Reverse pass through the proposal network (parameter gradients only).
    pub fn proposal_backward(&self, tape: &ProposalTape<T>, grad: T, acc: &mut FieldGradAccum<T>) {
        let p = self.params;
        let layout = p.layout();
        let pw = p.arch().proposal_width;
        let n = layout.proposal.len();
        let dpre = [grad * sigmoid(tape.pre)];
        let mut dh = vec![T::zero(); pw];
        let mut tmp = vec![T::zero(); pw];
        let last = &tape.hidden[(n - 1) * pw..];
        dense_backward(&p.values, &mut acc.params, &layout.proposal_out, last, &dpre, Some(&mut dh));
        for i in (0..n).rev() {
            let h = &tape.hidden[i * pw..(i + 1) * pw];
            for (g, &v) in dh.iter_mut().zip(h) {
                if !(v > T::zero()) {
                    *g = T::zero();
                }
            }
            let d = &layout.proposal[i];
            if i == 0 {
                dense_backward(&p.values, &mut acc.params, d, &tape.encoded, &dh, None);
            } else {
                let x = &tape.hidden[(i - 1) * pw..i * pw];
                dense_backward(&p.values, &mut acc.params, d, x, &dh, Some(&mut tmp));
                std::mem::swap(&mut dh, &mut tmp);
            }
        }
    }

    pub fn accumulator(&self) -> FieldGradAccum<T> {
        FieldGradAccum::new(self.params)
    }

    /// Applies the deferred conditioning gradients and returns `dL/dbeta`.
    ///
    /// `acc` must only hold samples evaluated with this evaluator.
    pub fn finalize(&self, acc: &mut FieldGradAccum<T>) -> [T; SHAPE_DIM] {
        let p = self.params;
        let layout = p.layout();
        let t0 = &layout.trunk[0];
        let enc = layout.encoded;
        let w = &p.values[t0.weights()];
        let mut dcond = vec![T::zero(); self.cond.len()];
        {
            let gw = &mut acc.params[t0.weights()];
            for (o, &g) in acc.first_layer.iter().enumerate() {
                if g == T::zero() {
                    continue;
                }
                let row = o * t0.inputs + enc..(o + 1) * t0.inputs;
                axpy(g, &self.cond, &mut gw[row.clone()]);
                axpy(g, &w[row], &mut dcond);
            }
        }
        acc.first_layer.iter_mut().for_each(|v| *v = T::zero());
        let mut dinput = vec![T::zero(); self.cond_input.len()];
        dense_backward(&p.values, &mut acc.params, &layout.conditioning, &self.cond_input, &dcond, Some(&mut dinput));
        let mut dbeta = [T::zero(); SHAPE_DIM];
        dbeta.copy_from_slice(&dinput[dinput.len() - SHAPE_DIM..]);
        dbeta
    }
}

/// Per-worker gradient accumulator; merge by summation.
#[derive(Clone, Debug, PartialEq)]
pub struct FieldGradAccum<T> {
    pub params: Vec<T>,
    /// Summed first-layer pre-activation gradients awaiting the conditioning outer product.
    first_layer: Vec<T>,
}

impl<T: Scalar> FieldGradAccum<T> {
    pub fn new(params: &FieldParams<T>) -> Self {
        Self {
            params: vec![T::zero(); params.len()],
            first_layer: vec![T::zero(); params.arch().width],
        }
    }

    pub fn merge(&mut self, other: &Self) {
        for (a, b) in self.params.iter_mut().zip(&other.params) {
            *a += *b;
        }
        for (a, b) in self.first_layer.iter_mut().zip(&other.first_layer) {
            *a += *b;
        }
    }
}

pub struct FieldInput<'a, T> {
    pub coord: SemanticCoord<T>,
    pub pose: &'a Pose<T>,
    pub shape: &'a Shape<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FieldGradients<T> {
    /// `dL/dPhi` summed over the batch.
    pub params: Vec<T>,
    /// Gradient through the conditioning projection onto the shape scales.
    pub shape: [T; SHAPE_DIM],
    /// Per-sample gradient on `(d, s)`.
    pub inputs: Vec<[T; SEMANTIC_INPUTS]>,
}

/// Evaluates every input and back-propagates its upstream gradient.
pub fn field_eval_batch_with_param_grads<T: Scalar>(
    params: &FieldParams<T>,
    inputs: &[FieldInput<'_, T>],
    upstream: &[FieldOutputGrad<T>],
) -> Result<FieldGradients<T>, FieldError> {
    if inputs.len() != upstream.len() {
        return Err(FieldError::ShapeMismatch {
            expected: inputs.len(),
            got: upstream.len(),
        });
    }
    let mut total = vec![T::zero(); params.len()];
    let mut shape = [T::zero(); SHAPE_DIM];
    let mut grads_in = Vec::with_capacity(inputs.len());
    for (input, g) in inputs.iter().zip(upstream) {
        let ev = params.evaluator(input.pose, input.shape)?;
        let mut acc = ev.accumulator();
        let din = if g.touches_main() {
            let tape = ev.forward(&input.coord);
            ev.backward(&tape, g, &mut acc)
        } else {
            [T::zero(); SEMANTIC_INPUTS]
        };
        if g.proposal != T::zero() {
            let tape = ev.proposal_forward(&input.coord);
            ev.proposal_backward(&tape, g.proposal, &mut acc);
        }
        let db = ev.finalize(&mut acc);
        for (t, a) in total.iter_mut().zip(&acc.params) {
            *t += *a;
        }
        for (s, d) in shape.iter_mut().zip(db) {
            *s += d;
        }
        grads_in.push(din);
    }
    Ok(FieldGradients {
        params: total,
        shape,
        inputs: grads_in,
    })
}
