//! Reverse-mode differentiation over recorded tensor operations.
//!
//! Operations append nodes to a [`GradTape`] in execution order, so walking
//! the node list backwards is already reverse topological order; the backward
//! pass visits each recorded operation exactly once. One tape per training
//! step, single writer.

use alloc::format;
use alloc::rc::Rc;
use alloc::vec;
use alloc::vec::Vec;

use super::ops;
use super::{Result, Tensor, TensorError};

/// Handle to a value recorded on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// A differentiable operation defined outside the engine.
///
/// The forward value is computed by the caller; the tape only needs the
/// vector-Jacobian product to flow gradients to the inputs.
pub trait CustomOp {
    fn name(&self) -> &'static str;

    /// Per-input gradient contributions given the upstream gradient.
    /// `None` entries mean "no gradient flows to this input".
    fn grads(&self, inputs: &[&Tensor], output: &Tensor, grad_out: &Tensor)
        -> Vec<Option<Tensor>>;
}

enum Op {
    Leaf,
    Conv2d { x: Var, w: Var, stride: usize, pad: usize },
    GlobalAvgPool { x: Var },
    DenseAffine { v: Var, m: Var, bias: Var },
    Relu { x: Var },
    Add { a: Var, b: Var },
    Scale { x: Var, factor: f64 },
    Reshape { x: Var },
    SumAll { x: Var },
    SliceBatch { x: Var, index: usize },
    ConcatBatch { parts: Vec<Var> },
    SoftmaxCrossEntropy { logits: Var, labels: Rc<Vec<usize>> },
    Custom { op: Rc<dyn CustomOp>, inputs: Vec<Var> },
}

struct Node {
    op: Op,
    value: Tensor,
}

/// Ordered record of primitive operations with their result tensors.
#[derive(Default)]
pub struct GradTape {
    nodes: Vec<Node>,
}

impl GradTape {
    pub fn new() -> Self {
        GradTape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Record an input or parameter tensor.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(Op::Leaf, value)
    }

    /// Value produced at `v`.
    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, op: Op, value: Tensor) -> Var {
        self.nodes.push(Node { op, value });
        Var(self.nodes.len() - 1)
    }

    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var> {
        let y = ops::conv2d(self.value(x), self.value(w), stride, pad)?;
        Ok(self.push(Op::Conv2d { x, w, stride, pad }, y))
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let y = ops::global_avg_pool(self.value(x))?;
        Ok(self.push(Op::GlobalAvgPool { x }, y))
    }

    pub fn dense_affine(&mut self, v: Var, m: Var, bias: Var) -> Result<Var> {
        let y = ops::dense_affine(self.value(v), self.value(m), self.value(bias))?;
        Ok(self.push(Op::DenseAffine { v, m, bias }, y))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let y = ops::relu(self.value(x));
        self.push(Op::Relu { x }, y)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = ops::add(self.value(a), self.value(b))?;
        Ok(self.push(Op::Add { a, b }, y))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let y = ops::scale(self.value(x), factor);
        self.push(Op::Scale { x, factor }, y)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let y = self.value(x).reshaped(shape)?;
        Ok(self.push(Op::Reshape { x }, y))
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let y = ops::sum_all(self.value(x));
        self.push(Op::SumAll { x }, y)
    }

    /// Copy out sample `index` of a batched tensor, keeping a batch dim of 1.
    pub fn slice_batch(&mut self, x: Var, index: usize) -> Result<Var> {
        let t = self.value(x);
        if t.shape().is_empty() || index >= t.shape()[0] {
            return Err(TensorError::InvalidArgument {
                op: "slice_batch",
                detail: format!("index {index} out of range for shape {:?}", t.shape()),
            });
        }
        let stride: usize = t.shape()[1..].iter().product();
        let mut shape = t.shape().to_vec();
        shape[0] = 1;
        let y = Tensor::from_vec(&shape, t.data()[index * stride..(index + 1) * stride].to_vec())?;
        Ok(self.push(Op::SliceBatch { x, index }, y))
    }

    /// Concatenate along the batch axis; trailing dims must agree.
    pub fn concat_batch(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(TensorError::InvalidArgument {
                op: "concat_batch",
                detail: "no parts".into(),
            });
        }
        let rest = self.value(parts[0]).shape()[1..].to_vec();
        let mut batch = 0;
        let mut data = Vec::new();
        for &p in parts {
            let t = self.value(p);
            if t.shape()[1..] != rest[..] {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_batch",
                    detail: format!("{:?} vs {:?}", &t.shape()[1..], rest),
                });
            }
            batch += t.shape()[0];
            data.extend_from_slice(t.data());
        }
        let mut shape = vec![batch];
        shape.extend_from_slice(&rest);
        let y = Tensor::from_vec(&shape, data)?;
        Ok(self.push(
            Op::ConcatBatch {
                parts: parts.to_vec(),
            },
            y,
        ))
    }

    /// Mean softmax cross-entropy against integer labels, as a scalar node.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let y = ops::softmax_cross_entropy(self.value(logits), labels)?;
        Ok(self.push(
            Op::SoftmaxCrossEntropy {
                logits,
                labels: Rc::new(labels.to_vec()),
            },
            y,
        ))
    }

    /// Record an externally computed differentiable operation.
    pub fn custom(&mut self, op: Rc<dyn CustomOp>, inputs: &[Var], value: Tensor) -> Var {
        self.push(
            Op::Custom {
                op,
                inputs: inputs.to_vec(),
            },
            value,
        )
    }

    /// Run the backward pass from a scalar loss.
    ///
    /// Returns the gradient of the loss w.r.t. every recorded node; nodes the
    /// loss does not depend on have no entry (their gradient is zero).
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).numel() != 1 {
            return Err(TensorError::InvalidArgument {
                op: "backward",
                detail: format!("loss must be scalar, shape is {:?}", self.value(loss).shape()),
            });
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), 1.0));

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            match &self.nodes[i].op {
                Op::Leaf => {}
                Op::Conv2d { x, w, stride, pad } => {
                    let gx = ops::conv2d_grad_input(
                        &g,
                        self.value(*w),
                        *stride,
                        *pad,
                        self.value(*x).shape(),
                    );
                    let gw = ops::conv2d_grad_weight(
                        &g,
                        self.value(*x),
                        *stride,
                        *pad,
                        self.value(*w).shape(),
                    );
                    accumulate(&mut grads[x.0], gx);
                    accumulate(&mut grads[w.0], gw);
                }
                Op::GlobalAvgPool { x } => {
                    let xs = self.value(*x).shape();
                    let [n, c, h, w] = [xs[0], xs[1], xs[2], xs[3]];
                    let inv = 1.0 / (h * w) as f64;
                    let gx = Tensor::from_fn(xs, |i| g.data()[i / (h * w)] * inv);
                    debug_assert_eq!(n * c, g.numel());
                    accumulate(&mut grads[x.0], gx);
                }
                Op::DenseAffine { v, m, bias } => {
                    let vt = self.value(*v);
                    let mt = self.value(*m);
                    let [n, d] = [vt.shape()[0], vt.shape()[1]];
                    let dp = mt.shape()[0];
                    let mut gv = Tensor::zeros(vt.shape());
                    let mut gm = Tensor::zeros(mt.shape());
                    let mut gb = Tensor::zeros(&[dp]);
                    for b in 0..n {
                        for j in 0..dp {
                            let gj = g.data()[b * dp + j];
                            if gj == 0.0 {
                                continue;
                            }
                            gb.data_mut()[j] += gj;
                            for i2 in 0..d {
                                gv.data_mut()[b * d + i2] += gj * mt.data()[j * d + i2];
                                gm.data_mut()[j * d + i2] += gj * vt.data()[b * d + i2];
                            }
                        }
                    }
                    accumulate(&mut grads[v.0], gv);
                    accumulate(&mut grads[m.0], gm);
                    accumulate(&mut grads[bias.0], gb);
                }
                Op::Relu { x } => {
                    let xt = self.value(*x);
                    let gx =
                        Tensor::from_fn(xt.shape(), |i| {
                            if xt.data()[i] > 0.0 {
                                g.data()[i]
                            } else {
                                0.0
                            }
                        });
                    accumulate(&mut grads[x.0], gx);
                }
                Op::Add { a, b } => {
                    accumulate(&mut grads[a.0], g.clone());
                    accumulate(&mut grads[b.0], g.clone());
                }
                Op::Scale { x, factor } => {
                    accumulate(&mut grads[x.0], ops::scale(&g, *factor));
                }
                Op::Reshape { x } => {
                    let gx = g.reshaped(self.value(*x).shape())?;
                    accumulate(&mut grads[x.0], gx);
                }
                Op::SumAll { x } => {
                    let gx = Tensor::full(self.value(*x).shape(), g.data()[0]);
                    accumulate(&mut grads[x.0], gx);
                }
                Op::SliceBatch { x, index } => {
                    let xs = self.value(*x).shape();
                    let stride: usize = xs[1..].iter().product();
                    let mut gx = Tensor::zeros(xs);
                    gx.data_mut()[index * stride..(index + 1) * stride]
                        .copy_from_slice(g.data());
                    accumulate(&mut grads[x.0], gx);
                }
                Op::ConcatBatch { parts } => {
                    let mut offset = 0;
                    for &p in parts {
                        let pt = self.value(p);
                        let len = pt.numel();
                        let gp = Tensor::from_vec(
                            pt.shape(),
                            g.data()[offset..offset + len].to_vec(),
                        )?;
                        offset += len;
                        accumulate(&mut grads[p.0], gp);
                    }
                }
                Op::SoftmaxCrossEntropy { logits, labels } => {
                    let lt = self.value(*logits);
                    let [n, k] = [lt.shape()[0], lt.shape()[1]];
                    let probs = ops::softmax_rows(lt);
                    let gscale = g.data()[0] / n as f64;
                    let mut gl = probs;
                    for (b, &label) in labels.iter().enumerate() {
                        gl.data_mut()[b * k + label] -= 1.0;
                    }
                    accumulate(&mut grads[logits.0], ops::scale(&gl, gscale));
                }
                Op::Custom { op, inputs } => {
                    let vals: Vec<&Tensor> = inputs.iter().map(|v| self.value(*v)).collect();
                    let contributions = op.grads(&vals, &self.nodes[i].value, &g);
                    debug_assert_eq!(contributions.len(), inputs.len());
                    for (inp, contrib) in inputs.iter().zip(contributions) {
                        if let Some(c) = contrib {
                            accumulate(&mut grads[inp.0], c);
                        }
                    }
                }
            }
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }
}

fn accumulate(slot: &mut Option<Tensor>, contribution: Tensor) {
    match slot {
        None => *slot = Some(contribution),
        Some(t) => {
            debug_assert_eq!(t.shape(), contribution.shape());
            for (a, b) in t.data_mut().iter_mut().zip(contribution.data()) {
                *a += b;
            }
        }
    }
}

/// Per-node gradients produced by [`GradTape::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    /// Gradient of `v`, or zeros of its shape when the loss never saw it.
    pub fn wrt(&self, tape: &GradTape, v: Var) -> Tensor {
        match &self.grads[v.0] {
            Some(t) => t.clone(),
            None => Tensor::zeros(tape.value(v).shape()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gradient_is_all_ones() {
        let mut tape = GradTape::new();
        let x = tape.leaf(Tensor::from_fn(&[2, 3], |i| i as f64 - 2.5));
        let loss = tape.sum_all(x);
        let grads = tape.backward(loss).unwrap();
        assert!(grads.get(x).unwrap().data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn dead_relu_gives_zero_gradient() {
        let mut tape = GradTape::new();
        let x = tape.leaf(Tensor::full(&[4], -3.0));
        let r = tape.relu(x);
        let loss = tape.sum_all(r);
        let grads = tape.backward(loss).unwrap();
        assert!(grads.get(x).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut tape = GradTape::new();
        let x = tape.leaf(Tensor::zeros(&[2, 2]));
        assert!(matches!(
            tape.backward(x),
            Err(TensorError::InvalidArgument { .. })
        ));
    }

    #[test]
    fn unused_parameter_reports_zero_gradient() {
        let mut tape = GradTape::new();
        let x = tape.leaf(Tensor::full(&[3], 2.0));
        let unused = tape.leaf(Tensor::full(&[2], 7.0));
        let loss = tape.sum_all(x);
        let grads = tape.backward(loss).unwrap();
        assert!(grads.get(unused).is_none());
        assert_eq!(grads.wrt(&tape, unused).shape(), &[2]);
        assert!(grads.wrt(&tape, unused).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn slice_concat_roundtrip_passes_gradient_through() {
        let mut tape = GradTape::new();
        let x = tape.leaf(Tensor::from_fn(&[3, 2], |i| i as f64));
        let s0 = tape.slice_batch(x, 0).unwrap();
        let s1 = tape.slice_batch(x, 1).unwrap();
        let s2 = tape.slice_batch(x, 2).unwrap();
        let y = tape.concat_batch(&[s0, s1, s2]).unwrap();
        assert_eq!(tape.value(y).data(), tape.value(x).data());
        let doubled = tape.scale(y, 2.0);
        let loss = tape.sum_all(doubled);
        let grads = tape.backward(loss).unwrap();
        assert!(grads.get(x).unwrap().data().iter().all(|&v| v == 2.0));
    }
}
