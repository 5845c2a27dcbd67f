//! Recorded-forward reverse-mode differentiation.
//!
//! Every differentiable primitive appends a node to the tape; `backward`
//! walks the nodes in reverse and accumulates gradients into every node that
//! can reach a gradient-requiring leaf. Values are immutable once produced.

use crate::error::{Error, Result};
use crate::kernels::{self, ConvKind};
use crate::scalar::Scalar;
use crate::tensor::TensorBase;

/// Handle to a node on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Conv2d { input: Var, weight: Var, bias: Option<Var>, dilation: usize, kind: ConvKind },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Sigmoid(Var),
    Tanh(Var),
    Square(Var),
    Prelu { input: Var, slope: Var },
    ChannelScale { input: Var, scale: Var },
    SoftmaxChannels(Var),
    Down2(Var),
    Up2(Var),
    ConcatChannels(Vec<Var>),
    Repeat(Var),
    Sum(Var),
}

struct Node<S> {
    value: TensorBase<S>,
    op: Op,
    requires_grad: bool,
}

pub struct TapeBase<S = f64> {
    nodes: Vec<Node<S>>,
}

impl<S: Scalar> Default for TapeBase<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> TapeBase<S> {
    pub fn new() -> Self {
        TapeBase { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &TensorBase<S> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn leaf(&mut self, value: TensorBase<S>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    fn push(&mut self, value: TensorBase<S>, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn requires_any(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn conv2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        dilation: usize,
        kind: ConvKind,
    ) -> Result<Var> {
        let out = kernels::conv2d_forward(
            self.value(input),
            self.value(weight),
            bias.map(|b| self.value(b)),
            dilation,
            kind,
        )?;
        let mut parents = vec![input, weight];
        if let Some(b) = bias {
            parents.push(b);
        }
        let req = self.requires_any(&parents);
        Ok(self.push(out, Op::Conv2d { input, weight, bias, dilation, kind }, req))
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(S, S) -> S, op: Op) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Error::ShapeMismatch(format!(
                "elementwise operands differ: {:?} vs {:?}",
                va.shape(),
                vb.shape()
            )));
        }
        let data = va.iter().zip(vb.iter()).map(|(&x, &y)| f(x, y)).collect();
        let out = TensorBase::from_vec(va.shape(), data)?;
        let req = self.requires_any(&[a, b]);
        Ok(self.push(out, op, req))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    fn unary(&mut self, a: Var, f: impl Fn(S) -> S, op: Op) -> Var {
        let out = self.value(a).map(f);
        let req = self.nodes[a.0].requires_grad;
        self.push(out, op, req)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, kernels::sigmoid, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.tanh(), Op::Tanh(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, |x| x * x, Op::Square(a))
    }

    /// Leaky rectifier with one learnable slope per channel (dim 0 of the
    /// input).
    pub fn prelu(&mut self, input: Var, slope: Var) -> Result<Var> {
        let x = self.value(input);
        let a = self.value(slope);
        let channels = x.shape()[0];
        if a.shape() != [channels] {
            return Err(Error::ShapeMismatch(format!(
                "prelu slope must be [{}], got {:?}",
                channels,
                a.shape()
            )));
        }
        let plane = x.len() / channels;
        let mut data = Vec::with_capacity(x.len());
        for c in 0..channels {
            let ac = a.data()[c];
            for &v in &x.data()[c * plane..(c + 1) * plane] {
                data.push(if v >= S::zero() { v } else { ac * v });
            }
        }
        let out = TensorBase::from_vec(x.shape(), data)?;
        let req = self.requires_any(&[input, slope]);
        Ok(self.push(out, Op::Prelu { input, slope }, req))
    }

    /// Multiplies channel c of the input by `scale[c]` (peephole weights).
    pub fn channel_scale(&mut self, input: Var, scale: Var) -> Result<Var> {
        let x = self.value(input);
        let a = self.value(scale);
        let channels = x.shape()[0];
        if a.shape() != [channels] {
            return Err(Error::ShapeMismatch(format!(
                "channel_scale vector must be [{}], got {:?}",
                channels,
                a.shape()
            )));
        }
        let plane = x.len() / channels;
        let mut data = Vec::with_capacity(x.len());
        for c in 0..channels {
            let ac = a.data()[c];
            for &v in &x.data()[c * plane..(c + 1) * plane] {
                data.push(ac * v);
            }
        }
        let out = TensorBase::from_vec(x.shape(), data)?;
        let req = self.requires_any(&[input, scale]);
        Ok(self.push(out, Op::ChannelScale { input, scale }, req))
    }

    pub fn softmax_channels(&mut self, a: Var) -> Result<Var> {
        let out = kernels::softmax_channels(self.value(a))?;
        let req = self.nodes[a.0].requires_grad;
        Ok(self.push(out, Op::SoftmaxChannels(a), req))
    }

    pub fn down2(&mut self, a: Var) -> Result<Var> {
        let out = kernels::down2(self.value(a))?;
        let req = self.nodes[a.0].requires_grad;
        Ok(self.push(out, Op::Down2(a), req))
    }

    pub fn up2(&mut self, a: Var) -> Result<Var> {
        let out = kernels::up2(self.value(a))?;
        let req = self.nodes[a.0].requires_grad;
        Ok(self.push(out, Op::Up2(a), req))
    }

    /// Concatenates `[C_k, H, W]` tensors along the channel axis.
    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::InvalidArgument("concat of zero tensors".into()));
        }
        let first = self.value(parts[0]).shape().to_vec();
        if first.len() != 3 {
            return Err(Error::ShapeMismatch("concat_channels expects [C,H,W]".into()));
        }
        let mut channels = 0;
        for &p in parts {
            let sh = self.value(p).shape();
            if sh.len() != 3 || sh[1] != first[1] || sh[2] != first[2] {
                return Err(Error::ShapeMismatch(format!(
                    "concat_channels spatial mismatch: {:?} vs {:?}",
                    sh, first
                )));
            }
            channels += sh[0];
        }
        let mut data = Vec::with_capacity(channels * first[1] * first[2]);
        for &p in parts {
            data.extend_from_slice(self.value(p).data());
        }
        let out = TensorBase::from_vec(&[channels, first[1], first[2]], data)?;
        let req = self.requires_any(parts);
        Ok(self.push(out, Op::ConcatChannels(parts.to_vec()), req))
    }

    /// Broadcasts a single-element tensor to a `[times]` vector (used for
    /// gate vectors shared across channels).
    pub fn repeat(&mut self, a: Var, times: usize) -> Result<Var> {
        let x = self.value(a);
        if x.len() != 1 {
            return Err(Error::ShapeMismatch(format!(
                "repeat expects a single element, got shape {:?}",
                x.shape()
            )));
        }
        let out = TensorBase::filled(&[times], x.data()[0]);
        let req = self.nodes[a.0].requires_grad;
        Ok(self.push(out, Op::Repeat(a), req))
    }

    /// Scalar sum of all entries, shape `[1]`.
    pub fn sum(&mut self, a: Var) -> Var {
        let total = self.value(a).sum();
        let req = self.nodes[a.0].requires_grad;
        self.push(TensorBase::scalar(total), Op::Sum(a), req)
    }

    /// Reverse pass from explicit gradient seeds. Returns per-node gradients
    /// for gradient-requiring leaves; intermediate gradients are dropped as
    /// soon as they are consumed.
    pub fn backward(&self, seeds: &[(Var, TensorBase<S>)]) -> Result<Gradients<S>> {
        let mut grads: Vec<Option<TensorBase<S>>> = (0..self.nodes.len()).map(|_| None).collect();
        for (var, seed) in seeds {
            if seed.shape() != self.value(*var).shape() {
                return Err(Error::ShapeMismatch(format!(
                    "gradient seed shape {:?} does not match node shape {:?}",
                    seed.shape(),
                    self.value(*var).shape()
                )));
            }
            accumulate(&mut grads[var.0], seed);
        }
        for i in (0..self.nodes.len()).rev() {
            if !self.nodes[i].requires_grad || grads[i].is_none() {
                continue;
            }
            let g = grads[i].take().expect("gradient present");
            match &self.nodes[i].op {
                Op::Leaf => {
                    grads[i] = Some(g);
                    continue;
                }
                Op::Conv2d { input, weight, bias, dilation, kind } => {
                    let cg = kernels::conv2d_backward(
                        self.value(*input),
                        self.value(*weight),
                        bias.is_some(),
                        *dilation,
                        *kind,
                        &g,
                    )?;
                    self.accumulate_if_required(&mut grads, *input, cg.input);
                    self.accumulate_if_required(&mut grads, *weight, cg.weight);
                    if let (Some(b), Some(bg)) = (bias, cg.bias) {
                        self.accumulate_if_required(&mut grads, *b, bg);
                    }
                }
                Op::Add(a, b) => {
                    self.accumulate_if_required(&mut grads, *b, g.clone());
                    self.accumulate_if_required(&mut grads, *a, g);
                }
                Op::Sub(a, b) => {
                    let mut neg = g.clone();
                    neg.scale(-S::one());
                    self.accumulate_if_required(&mut grads, *b, neg);
                    self.accumulate_if_required(&mut grads, *a, g);
                }
                Op::Mul(a, b) => {
                    let ga = pointwise_mul(&g, self.value(*b));
                    let gb = pointwise_mul(&g, self.value(*a));
                    self.accumulate_if_required(&mut grads, *a, ga);
                    self.accumulate_if_required(&mut grads, *b, gb);
                }
                Op::Sigmoid(a) => {
                    let y = &self.nodes[i].value;
                    let data = g
                        .iter()
                        .zip(y.iter())
                        .map(|(&gv, &yv)| gv * yv * (S::one() - yv))
                        .collect();
                    let ga = TensorBase::from_vec(y.shape(), data)?;
                    self.accumulate_if_required(&mut grads, *a, ga);
                }
                Op::Tanh(a) => {
                    let y = &self.nodes[i].value;
                    let data = g
                        .iter()
                        .zip(y.iter())
                        .map(|(&gv, &yv)| gv * (S::one() - yv * yv))
                        .collect();
                    let ga = TensorBase::from_vec(y.shape(), data)?;
                    self.accumulate_if_required(&mut grads, *a, ga);
                }
                Op::Square(a) => {
                    let x = self.value(*a);
                    let two = S::of(2.0);
                    let data = g.iter().zip(x.iter()).map(|(&gv, &xv)| two * xv * gv).collect();
                    let ga = TensorBase::from_vec(x.shape(), data)?;
                    self.accumulate_if_required(&mut grads, *a, ga);
                }
                Op::Prelu { input, slope } => {
                    let x = self.value(*input);
                    let a = self.value(*slope);
                    let channels = x.shape()[0];
                    let plane = x.len() / channels;
                    let mut gi = TensorBase::zeros(x.shape());
                    let mut gs = TensorBase::zeros(&[channels]);
                    for c in 0..channels {
                        let ac = a.data()[c];
                        let mut slope_acc = S::zero();
                        for k in c * plane..(c + 1) * plane {
                            let xv = x.data()[k];
                            let gv = g.data()[k];
                            if xv >= S::zero() {
                                gi.data_mut()[k] = gv;
                            } else {
                                gi.data_mut()[k] = ac * gv;
                                slope_acc += gv * xv;
                            }
                        }
                        gs.data_mut()[c] = slope_acc;
                    }
                    self.accumulate_if_required(&mut grads, *input, gi);
                    self.accumulate_if_required(&mut grads, *slope, gs);
                }
                Op::ChannelScale { input, scale } => {
                    let x = self.value(*input);
                    let a = self.value(*scale);
                    let channels = x.shape()[0];
                    let plane = x.len() / channels;
                    let mut gi = TensorBase::zeros(x.shape());
                    let mut gs = TensorBase::zeros(&[channels]);
                    for c in 0..channels {
                        let ac = a.data()[c];
                        let mut acc = S::zero();
                        for k in c * plane..(c + 1) * plane {
                            gi.data_mut()[k] = ac * g.data()[k];
                            acc += g.data()[k] * x.data()[k];
                        }
                        gs.data_mut()[c] = acc;
                    }
                    self.accumulate_if_required(&mut grads, *input, gi);
                    self.accumulate_if_required(&mut grads, *scale, gs);
                }
                Op::SoftmaxChannels(a) => {
                    let ga = kernels::softmax_channels_backward(&self.nodes[i].value, &g);
                    self.accumulate_if_required(&mut grads, *a, ga);
                }
                Op::Down2(a) => {
                    let ga = kernels::down2_backward(self.value(*a).shape(), &g);
                    self.accumulate_if_required(&mut grads, *a, ga);
                }
                Op::Up2(a) => {
                    let ga = kernels::up2_backward(self.value(*a).shape(), &g);
                    self.accumulate_if_required(&mut grads, *a, ga);
                }
                Op::ConcatChannels(parts) => {
                    let sh = self.nodes[i].value.shape();
                    let plane = sh[1] * sh[2];
                    let mut offset = 0;
                    for &p in parts {
                        let pc = self.value(p).shape()[0];
                        let gp = TensorBase::from_vec(
                            self.value(p).shape(),
                            g.data()[offset * plane..(offset + pc) * plane].to_vec(),
                        )?;
                        offset += pc;
                        self.accumulate_if_required(&mut grads, p, gp);
                    }
                }
                Op::Repeat(a) => {
                    let mut ga = TensorBase::zeros(self.value(*a).shape());
                    ga.data_mut()[0] = g.sum();
                    self.accumulate_if_required(&mut grads, *a, ga);
                }
                Op::Sum(a) => {
                    let ga = TensorBase::filled(self.value(*a).shape(), g.data()[0]);
                    self.accumulate_if_required(&mut grads, *a, ga);
                }
            }
        }
        Ok(Gradients { grads })
    }

    fn accumulate_if_required(
        &self,
        grads: &mut [Option<TensorBase<S>>],
        var: Var,
        delta: TensorBase<S>,
    ) {
        if self.nodes[var.0].requires_grad {
            accumulate(&mut grads[var.0], &delta);
        }
    }
}

fn accumulate<S: Scalar>(slot: &mut Option<TensorBase<S>>, delta: &TensorBase<S>) {
    match slot {
        Some(g) => g.add_assign(delta),
        None => *slot = Some(delta.clone()),
    }
}

fn pointwise_mul<S: Scalar>(a: &TensorBase<S>, b: &TensorBase<S>) -> TensorBase<S> {
    let data = a.iter().zip(b.iter()).map(|(&x, &y)| x * y).collect();
    TensorBase::from_vec(a.shape(), data).expect("shapes checked at forward")
}

pub struct Gradients<S = f64> {
    grads: Vec<Option<TensorBase<S>>>,
}

impl<S: Scalar> Gradients<S> {
    pub fn get(&self, v: Var) -> Option<&TensorBase<S>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}
