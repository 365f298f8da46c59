//! Define-by-run reverse-mode differentiation over [`Tensor`]s.
//!
//! A [`Tape`] records every primitive application in execution order, so the
//! node list is topologically sorted by construction. [`Tape::backward`] walks
//! it once in reverse, producing gradients for every leaf that requires them,
//! and leaves the tape empty for the next forward pass.
//!
//! ```
//! use tailnas::autodiff::Tape;
//! use tailnas::tensor::Tensor;
//!
//! let tape = Tape::new();
//! let x = tape.param(Tensor::from_vec(vec![3.0]));
//! let y = tape.mul(x, x).unwrap();
//! let loss = tape.sum(y).unwrap();
//! let grads = tape.backward(loss).unwrap();
//! assert_eq!(grads.get(x).unwrap().data(), &[6.0]);
//! ```

mod gradcheck;
pub mod kernels;
mod primitive;

use std::cell::{Ref, RefCell};

pub use gradcheck::{grad_check, grad_check_many, GradCheckReport};
pub use kernels::{ConvAttrs, PoolAttrs};
pub use primitive::{Attrs, BnMode, Primitive, BN_EPS, BN_MOMENTUM};

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use kernels::*;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Values saved by a forward kernel for its backward rule.
enum Saved {
    None,
    Conv(ConvGeom),
    MaxPool(Vec<usize>),
    Norm {
        mean: Vec<f64>,
        invstd: Vec<f64>,
    },
    BatchNormTrain {
        mean: Vec<f64>,
        var: Vec<f64>,
        invstd: Vec<f64>,
    },
    Broadcast(Vec<usize>),
}

struct Node {
    value: Tensor,
    inputs: Vec<usize>,
    prim: Option<Primitive>,
    saved: Saved,
    requires_grad: bool,
}

/// Batch moments produced by a train-mode batchnorm node.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Biased (population) variance.
    pub var: Vec<f64>,
    pub count: usize,
}

/// Recorded computation. Single-threaded by construction (interior mutability).
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Gradients of a scalar loss with respect to the tape's leaves.
#[derive(Debug, Default)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.borrow().is_empty()
    }

    /// Records a leaf; it receives a gradient iff `t.requires_grad`.
    pub fn leaf(&self, t: Tensor) -> Var {
        let requires_grad = t.requires_grad;
        let mut value = t;
        value.grad = None;
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            inputs: Vec::new(),
            prim: None,
            saved: Saved::None,
            requires_grad,
        });
        Var(nodes.len() - 1)
    }

    /// Leaf that receives a gradient.
    pub fn param(&self, t: Tensor) -> Var {
        self.leaf(t.with_requires_grad(true))
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&self, t: Tensor) -> Var {
        self.leaf(t.with_requires_grad(false))
    }

    pub fn value(&self, v: Var) -> Ref<'_, Tensor> {
        Ref::map(self.nodes.borrow(), |n| &n[v.0].value)
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].requires_grad
    }

    /// Applies `prim` to `inputs` and records the result.
    pub fn apply(&self, prim: Primitive, inputs: &[Var]) -> Result<Var> {
        let (value, saved, requires_grad) = {
            let nodes = self.nodes.borrow();
            let vals: Vec<&Tensor> = inputs.iter().map(|v| &nodes[v.0].value).collect();
            let (value, saved) = forward(&prim, &vals)?;
            let rg = inputs.iter().any(|v| nodes[v.0].requires_grad);
            (value, saved, rg)
        };
        if !value.is_finite() {
            return Err(Error::NonFinite(prim.name().to_string()));
        }
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            inputs: inputs.iter().map(|v| v.0).collect(),
            prim: Some(prim),
            saved,
            requires_grad,
        });
        Ok(Var(nodes.len() - 1))
    }

    pub fn conv2d(&self, x: Var, kernel: Var, attrs: ConvAttrs) -> Result<Var> {
        self.apply(Primitive::Conv2d(attrs), &[x, kernel])
    }
    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        self.apply(Primitive::MatMul, &[a, b])
    }
    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        self.apply(Primitive::Add, &[a, b])
    }
    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        self.apply(Primitive::Sub, &[a, b])
    }
    pub fn scale(&self, x: Var, factor: f64) -> Result<Var> {
        self.apply(Primitive::Scale(factor), &[x])
    }
    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        self.apply(Primitive::Mul, &[a, b])
    }
    pub fn broadcast_add(&self, a: Var, b: Var) -> Result<Var> {
        self.apply(Primitive::BroadcastAdd, &[a, b])
    }
    pub fn broadcast_mul(&self, a: Var, b: Var) -> Result<Var> {
        self.apply(Primitive::BroadcastMul, &[a, b])
    }
    pub fn concat(&self, xs: &[Var]) -> Result<Var> {
        self.apply(Primitive::Concat, xs)
    }
    /// Splits along the channel axis into consecutive pieces of the given widths.
    pub fn split(&self, x: Var, widths: &[usize]) -> Result<Vec<Var>> {
        let total: usize = widths.iter().sum();
        let shape = self.shape(x);
        if shape.len() < 2 || total != shape[1] {
            return Err(Error::ShapeMismatch {
                op: "split",
                lhs: shape,
                rhs: widths.to_vec(),
            });
        }
        let mut start = 0;
        widths
            .iter()
            .map(|&len| {
                let v = self.apply(Primitive::Split { start, len }, &[x]);
                start += len;
                v
            })
            .collect()
    }
    pub fn relu(&self, x: Var) -> Result<Var> {
        self.apply(Primitive::Relu, &[x])
    }
    pub fn sigmoid(&self, x: Var) -> Result<Var> {
        self.apply(Primitive::Sigmoid, &[x])
    }
    pub fn gelu(&self, x: Var) -> Result<Var> {
        self.apply(Primitive::Gelu, &[x])
    }
    /// Batchnorm; in [`BnMode::Train`] also returns the batch moments for running-stat updates.
    pub fn batch_norm(
        &self,
        x: Var,
        gamma: Var,
        beta: Var,
        mode: BnMode,
    ) -> Result<(Var, Option<BatchStats>)> {
        let train = matches!(mode, BnMode::Train);
        let out = self.apply(Primitive::BatchNorm(mode), &[x, gamma, beta])?;
        if !train {
            return Ok((out, None));
        }
        let nodes = self.nodes.borrow();
        let node = &nodes[out.0];
        let shape = node.value.shape();
        let count = shape[0] * shape[2..].iter().product::<usize>();
        match &node.saved {
            Saved::BatchNormTrain { mean, var, .. } => Ok((
                out,
                Some(BatchStats {
                    mean: mean.clone(),
                    var: var.clone(),
                    count,
                }),
            )),
            _ => unreachable!("train-mode batchnorm saves batch moments"),
        }
    }
    pub fn group_norm(&self, x: Var, gamma: Var, beta: Var, groups: usize) -> Result<Var> {
        self.apply(Primitive::GroupNorm { groups }, &[x, gamma, beta])
    }
    pub fn max_pool(&self, x: Var, attrs: PoolAttrs) -> Result<Var> {
        self.apply(Primitive::MaxPool(attrs), &[x])
    }
    pub fn avg_pool(&self, x: Var, attrs: PoolAttrs) -> Result<Var> {
        self.apply(Primitive::AvgPool(attrs), &[x])
    }
    pub fn global_avg_pool(&self, x: Var) -> Result<Var> {
        self.apply(Primitive::GlobalAvgPool, &[x])
    }
    pub fn softmax(&self, x: Var, axis: usize) -> Result<Var> {
        self.apply(Primitive::Softmax { axis }, &[x])
    }
    pub fn log_softmax(&self, x: Var, axis: usize) -> Result<Var> {
        self.apply(Primitive::LogSoftmax { axis }, &[x])
    }
    pub fn reshape(&self, x: Var, shape: Vec<usize>) -> Result<Var> {
        self.apply(Primitive::Reshape(shape), &[x])
    }
    pub fn sum(&self, x: Var) -> Result<Var> {
        self.apply(Primitive::Sum, &[x])
    }
    pub fn mean(&self, x: Var) -> Result<Var> {
        self.apply(Primitive::Mean, &[x])
    }
    pub fn weighted_sum(&self, weights: Var, row: usize, terms: &[(usize, Var)]) -> Result<Var> {
        let mut inputs = Vec::with_capacity(terms.len() + 1);
        inputs.push(weights);
        inputs.extend(terms.iter().map(|t| t.1));
        let cols = terms.iter().map(|t| t.0).collect();
        self.apply(Primitive::WeightedSum { row, cols }, &inputs)
    }
    pub fn nll(&self, logp: Var, labels: &[usize], weights: &[f64]) -> Result<Var> {
        self.apply(
            Primitive::Nll {
                labels: labels.to_vec(),
                weights: weights.to_vec(),
            },
            &[logp],
        )
    }

    /// Back-propagates from a scalar `loss`. Clears the tape.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let mut nodes = std::mem::take(&mut *self.nodes.borrow_mut());
        if loss.0 >= nodes.len() {
            return Err(Error::InvalidArgument("loss is not on this tape".into()));
        }
        let loss_shape = nodes[loss.0].value.shape().to_vec();
        if nodes[loss.0].value.len() != 1 {
            return Err(Error::NonScalarLoss(loss_shape));
        }
        nodes.truncate(loss.0 + 1);
        let mut grads: Vec<Option<Vec<f64>>> = (0..nodes.len()).map(|_| None).collect();
        let mut out: Vec<Option<Tensor>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        while let Some(node) = nodes.pop() {
            let i = nodes.len();
            let Some(dy) = grads[i].take() else { continue };
            if !node.requires_grad {
                continue;
            }
            let Some(prim) = &node.prim else {
                out[i] = Some(Tensor::from_parts(node.value.shape().to_vec(), dy));
                continue;
            };
            let need: Vec<bool> = node
                .inputs
                .iter()
                .map(|&j| nodes[j].requires_grad)
                .collect();
            let vals: Vec<&Tensor> = node.inputs.iter().map(|&j| &nodes[j].value).collect();
            let input_grads = backward_rule(prim, &node.saved, &vals, &node.value, &dy, &need);
            for (&j, g) in node.inputs.iter().zip(input_grads) {
                let Some(g) = g else { continue };
                match &mut grads[j] {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    slot => *slot = Some(g),
                }
            }
        }
        Ok(Gradients { grads: out })
    }
}

fn mismatch(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::ShapeMismatch {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

fn invalid(op: &'static str, t: &Tensor, reason: impl Into<String>) -> Error {
    Error::InvalidShape {
        op,
        shape: t.shape().to_vec(),
        reason: reason.into(),
    }
}

fn arity(prim: &Primitive, inputs: &[&Tensor], n: usize) -> Result<()> {
    if inputs.len() != n {
        return Err(Error::InvalidArgument(format!(
            "{} takes {} inputs, got {}",
            prim.name(),
            n,
            inputs.len()
        )));
    }
    Ok(())
}

fn map(t: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    Tensor::from_parts(t.shape().to_vec(), t.data().iter().map(|&v| f(v)).collect())
}

fn gelu(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
    0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4;
    let u = C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * C * (1.0 + 3.0 * 0.044715 * x * x)
}

fn check_norm_params(op: &'static str, x: &Tensor, g: &Tensor, b: &Tensor) -> Result<()> {
    if x.rank() < 2 {
        return Err(invalid(op, x, "expected (N, C, ...)"));
    }
    let c = x.shape()[1];
    if g.len() != c || b.len() != c {
        return Err(mismatch(op, x, g));
    }
    Ok(())
}

fn forward(prim: &Primitive, inputs: &[&Tensor]) -> Result<(Tensor, Saved)> {
    use Primitive as P;
    let plain = |t: Tensor| Ok((t, Saved::None));
    match prim {
        P::Conv2d(attrs) => {
            arity(prim, inputs, 2)?;
            let (x, w) = (inputs[0], inputs[1]);
            let geom =
                conv_geom(x.shape(), w.shape(), *attrs).map_err(|r| Error::InvalidShape {
                    op: "conv2d",
                    shape: x.shape().to_vec(),
                    reason: format!("{r}; kernel {:?}", w.shape()),
                })?;
            let out = conv2d_forward(&geom, x.data(), w.data());
            Ok((
                Tensor::from_parts(vec![geom.n, geom.c_out, geom.ho, geom.wo], out),
                Saved::Conv(geom),
            ))
        }
        P::MatMul => {
            arity(prim, inputs, 2)?;
            let (a, b) = (inputs[0], inputs[1]);
            if a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0] {
                return Err(mismatch("matmul", a, b));
            }
            let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
            plain(Tensor::from_parts(
                vec![m, n],
                matmul(a.data(), b.data(), m, k, n),
            ))
        }
        P::Add | P::Sub | P::Mul => {
            arity(prim, inputs, 2)?;
            let (a, b) = (inputs[0], inputs[1]);
            if a.shape() != b.shape() {
                return Err(mismatch(prim.name(), a, b));
            }
            let data = a
                .data()
                .iter()
                .zip(b.data())
                .map(|(x, y)| match prim {
                    P::Add => x + y,
                    P::Sub => x - y,
                    _ => x * y,
                })
                .collect();
            plain(Tensor::from_parts(a.shape().to_vec(), data))
        }
        P::Scale(f) => {
            arity(prim, inputs, 1)?;
            plain(map(inputs[0], |v| v * f))
        }
        P::BroadcastAdd | P::BroadcastMul => {
            arity(prim, inputs, 2)?;
            let (a, b) = (inputs[0], inputs[1]);
            let idx =
                broadcast_index(a.shape(), b.shape()).ok_or_else(|| mismatch(prim.name(), a, b))?;
            let add = matches!(prim, P::BroadcastAdd);
            let bd = b.data();
            let data = a
                .data()
                .iter()
                .zip(&idx)
                .map(|(x, &j)| if add { x + bd[j] } else { x * bd[j] })
                .collect();
            Ok((
                Tensor::from_parts(a.shape().to_vec(), data),
                Saved::Broadcast(idx),
            ))
        }
        P::Concat => {
            if inputs.is_empty() {
                return Err(Error::InvalidArgument("concat of zero tensors".into()));
            }
            let first = inputs[0];
            if first.rank() < 2 {
                return Err(invalid("concat", first, "expected (N, C, ...)"));
            }
            let n = first.shape()[0];
            let inner: usize = first.shape()[2..].iter().product();
            for t in inputs {
                if t.rank() != first.rank()
                    || t.shape()[0] != n
                    || t.shape()[2..] != first.shape()[2..]
                {
                    return Err(mismatch("concat", first, t));
                }
            }
            let c_total: usize = inputs.iter().map(|t| t.shape()[1]).sum();
            let mut data = Vec::with_capacity(n * c_total * inner);
            for b in 0..n {
                for t in inputs {
                    let per = t.shape()[1] * inner;
                    data.extend_from_slice(&t.data()[b * per..(b + 1) * per]);
                }
            }
            let mut shape = first.shape().to_vec();
            shape[1] = c_total;
            plain(Tensor::from_parts(shape, data))
        }
        P::Split { start, len } => {
            arity(prim, inputs, 1)?;
            let x = inputs[0];
            if x.rank() < 2 || *len == 0 || start + len > x.shape()[1] {
                return Err(invalid(
                    "split",
                    x,
                    format!("channel range {start}..{}", start + len),
                ));
            }
            let (n, c) = (x.shape()[0], x.shape()[1]);
            let inner: usize = x.shape()[2..].iter().product();
            let mut data = Vec::with_capacity(n * len * inner);
            for b in 0..n {
                data.extend_from_slice(
                    &x.data()[(b * c + start) * inner..(b * c + start + len) * inner],
                );
            }
            let mut shape = x.shape().to_vec();
            shape[1] = *len;
            plain(Tensor::from_parts(shape, data))
        }
        P::Relu => {
            arity(prim, inputs, 1)?;
            plain(map(inputs[0], |v| if v > 0.0 { v } else { 0.0 }))
        }
        P::Sigmoid => {
            arity(prim, inputs, 1)?;
            plain(map(inputs[0], |v| 1.0 / (1.0 + (-v).exp())))
        }
        P::Gelu => {
            arity(prim, inputs, 1)?;
            plain(map(inputs[0], gelu))
        }
        P::BatchNorm(mode) => {
            arity(prim, inputs, 3)?;
            let (x, g, b) = (inputs[0], inputs[1], inputs[2]);
            check_norm_params("batchnorm", x, g, b)?;
            match mode {
                BnMode::Train => {
                    let (mean, var) = channel_moments(x.shape(), x.data());
                    let invstd: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
                    let out =
                        channel_affine(x.shape(), x.data(), &mean, &invstd, g.data(), b.data());
                    Ok((
                        Tensor::from_parts(x.shape().to_vec(), out),
                        Saved::BatchNormTrain { mean, var, invstd },
                    ))
                }
                BnMode::Eval { mean, var } => {
                    if mean.len() != g.len() || var.len() != g.len() {
                        return Err(invalid("batchnorm", x, "running statistics width"));
                    }
                    let invstd: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
                    let out =
                        channel_affine(x.shape(), x.data(), mean, &invstd, g.data(), b.data());
                    Ok((
                        Tensor::from_parts(x.shape().to_vec(), out),
                        Saved::Norm {
                            mean: mean.clone(),
                            invstd,
                        },
                    ))
                }
            }
        }
        P::GroupNorm { groups } => {
            arity(prim, inputs, 3)?;
            let (x, g, b) = (inputs[0], inputs[1], inputs[2]);
            check_norm_params("groupnorm", x, g, b)?;
            if *groups == 0 || x.shape()[1] % groups != 0 {
                return Err(invalid(
                    "groupnorm",
                    x,
                    format!("{groups} groups do not divide channels"),
                ));
            }
            let (out, mean, invstd) =
                group_norm_forward(x.shape(), x.data(), *groups, BN_EPS, g.data(), b.data());
            Ok((
                Tensor::from_parts(x.shape().to_vec(), out),
                Saved::Norm { mean, invstd },
            ))
        }
        P::MaxPool(p) | P::AvgPool(p) => {
            arity(prim, inputs, 1)?;
            let x = inputs[0];
            if x.rank() != 4 {
                return Err(invalid(prim.name(), x, "expected (N, C, H, W)"));
            }
            let s = x.shape();
            let (ho, wo) = match (p.out_extent(s[2]), p.out_extent(s[3])) {
                (Some(h), Some(w)) => (h, w),
                _ => return Err(invalid(prim.name(), x, "spatial size below pooling window")),
            };
            let shape = vec![s[0], s[1], ho, wo];
            if matches!(prim, P::MaxPool(_)) {
                let (out, arg) = max_pool_forward(s, x.data(), *p, ho, wo);
                Ok((Tensor::from_parts(shape, out), Saved::MaxPool(arg)))
            } else {
                plain(Tensor::from_parts(
                    shape,
                    avg_pool_forward(s, x.data(), *p, ho, wo),
                ))
            }
        }
        P::GlobalAvgPool => {
            arity(prim, inputs, 1)?;
            let x = inputs[0];
            if x.rank() != 4 {
                return Err(invalid("global_avg_pool", x, "expected (N, C, H, W)"));
            }
            let s = x.shape();
            let hw = s[2] * s[3];
            let data = x
                .data()
                .chunks(hw)
                .map(|c| c.iter().sum::<f64>() / hw as f64)
                .collect();
            plain(Tensor::from_parts(vec![s[0], s[1]], data))
        }
        P::Softmax { axis } | P::LogSoftmax { axis } => {
            arity(prim, inputs, 1)?;
            let x = inputs[0];
            if *axis >= x.rank() {
                return Err(invalid(prim.name(), x, format!("axis {axis} out of range")));
            }
            let log = matches!(prim, P::LogSoftmax { .. });
            plain(Tensor::from_parts(
                x.shape().to_vec(),
                softmax_forward(x.shape(), *axis, x.data(), log),
            ))
        }
        P::Reshape(shape) => {
            arity(prim, inputs, 1)?;
            let x = inputs[0];
            plain(x.clone().reshape(shape.clone())?)
        }
        P::Sum | P::Mean => {
            arity(prim, inputs, 1)?;
            let x = inputs[0];
            let s = x.sum();
            plain(Tensor::scalar(if matches!(prim, P::Mean) {
                s / x.len() as f64
            } else {
                s
            }))
        }
        P::WeightedSum { row, cols } => {
            if inputs.len() != cols.len() + 1 || cols.is_empty() {
                return Err(Error::InvalidArgument(
                    "weighted_sum takes weights plus one tensor per column".into(),
                ));
            }
            let w = inputs[0];
            if w.rank() != 2 || *row >= w.shape()[0] || cols.iter().any(|&c| c >= w.shape()[1]) {
                return Err(invalid(
                    "weighted_sum",
                    w,
                    format!("row {row}, columns {cols:?}"),
                ));
            }
            let k = w.shape()[1];
            let first = inputs[1];
            let mut out = vec![0.0; first.len()];
            for (j, t) in inputs[1..].iter().enumerate() {
                if t.shape() != first.shape() {
                    return Err(mismatch("weighted_sum", first, t));
                }
                let c = w.data()[row * k + cols[j]];
                out.iter_mut().zip(t.data()).for_each(|(o, v)| *o += c * v);
            }
            plain(Tensor::from_parts(first.shape().to_vec(), out))
        }
        P::Nll { labels, weights } => {
            arity(prim, inputs, 1)?;
            let x = inputs[0];
            if x.rank() != 2 || labels.len() != x.shape()[0] || weights.len() != labels.len() {
                return Err(invalid(
                    "nll",
                    x,
                    format!("{} labels, {} weights", labels.len(), weights.len()),
                ));
            }
            let c = x.shape()[1];
            let wsum: f64 = weights.iter().sum();
            if wsum <= 0.0 {
                return Err(Error::InvalidArgument(
                    "nll weights must have positive sum".into(),
                ));
            }
            let mut s = 0.0;
            for (i, (&y, &w)) in labels.iter().zip(weights).enumerate() {
                if y >= c {
                    return Err(Error::LabelOutOfRange {
                        label: y,
                        classes: c,
                    });
                }
                s -= w * x.data()[i * c + y];
            }
            plain(Tensor::scalar(s / wsum))
        }
    }
}

/// Gradients of `prim`'s inputs given the output gradient `dy`. Entries for inputs
/// with `need[i] == false` may be `None`.
fn backward_rule(
    prim: &Primitive,
    saved: &Saved,
    inputs: &[&Tensor],
    out: &Tensor,
    dy: &[f64],
    need: &[bool],
) -> Vec<Option<Vec<f64>>> {
    use Primitive as P;
    let elementwise = |x: &Tensor, f: &dyn Fn(f64, f64) -> f64| -> Vec<f64> {
        x.data().iter().zip(dy).map(|(&v, &g)| f(v, g)).collect()
    };
    match prim {
        P::Conv2d(_) => {
            let Saved::Conv(geom) = saved else {
                unreachable!()
            };
            let (dx, dw) = conv2d_backward(
                geom,
                inputs[0].data(),
                inputs[1].data(),
                dy,
                need[0],
                need[1],
            );
            vec![dx, dw]
        }
        P::MatMul => {
            let (a, b) = (inputs[0], inputs[1]);
            let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
            let da = need[0].then(|| matmul_nt(dy, b.data(), m, n, k));
            let db = need[1].then(|| matmul_tn(a.data(), dy, m, k, n));
            vec![da, db]
        }
        P::Add => vec![need[0].then(|| dy.to_vec()), need[1].then(|| dy.to_vec())],
        P::Sub => vec![
            need[0].then(|| dy.to_vec()),
            need[1].then(|| dy.iter().map(|g| -g).collect()),
        ],
        P::Mul => vec![
            need[0].then(|| elementwise(inputs[1], &|v, g| v * g)),
            need[1].then(|| elementwise(inputs[0], &|v, g| v * g)),
        ],
        P::Scale(f) => vec![Some(dy.iter().map(|g| g * f).collect())],
        P::BroadcastAdd | P::BroadcastMul => {
            let Saved::Broadcast(idx) = saved else {
                unreachable!()
            };
            let (a, b) = (inputs[0], inputs[1]);
            let add = matches!(prim, P::BroadcastAdd);
            let da = need[0].then(|| {
                if add {
                    dy.to_vec()
                } else {
                    dy.iter().zip(idx).map(|(g, &j)| g * b.data()[j]).collect()
                }
            });
            let db = need[1].then(|| {
                let mut db = vec![0.0; b.len()];
                for (i, &j) in idx.iter().enumerate() {
                    db[j] += if add { dy[i] } else { dy[i] * a.data()[i] };
                }
                db
            });
            vec![da, db]
        }
        P::Concat => {
            let n = out.shape()[0];
            let inner: usize = out.shape()[2..].iter().product();
            let c_total = out.shape()[1];
            let mut grads = Vec::with_capacity(inputs.len());
            let mut c0 = 0;
            for (t, &nd) in inputs.iter().zip(need) {
                let c = t.shape()[1];
                grads.push(nd.then(|| {
                    let mut g = Vec::with_capacity(t.len());
                    for b in 0..n {
                        g.extend_from_slice(
                            &dy[(b * c_total + c0) * inner..(b * c_total + c0 + c) * inner],
                        );
                    }
                    g
                }));
                c0 += c;
            }
            grads
        }
        P::Split { start, len } => {
            let x = inputs[0];
            let (n, c) = (x.shape()[0], x.shape()[1]);
            let inner: usize = x.shape()[2..].iter().product();
            let mut dx = vec![0.0; x.len()];
            for b in 0..n {
                dx[(b * c + start) * inner..(b * c + start + len) * inner]
                    .copy_from_slice(&dy[b * len * inner..(b + 1) * len * inner]);
            }
            vec![Some(dx)]
        }
        P::Relu => vec![Some(elementwise(inputs[0], &|v, g| {
            if v > 0.0 {
                g
            } else {
                0.0
            }
        }))],
        P::Sigmoid => vec![Some(
            out.data()
                .iter()
                .zip(dy)
                .map(|(&s, &g)| g * s * (1.0 - s))
                .collect(),
        )],
        P::Gelu => vec![Some(elementwise(inputs[0], &|v, g| g * gelu_grad(v)))],
        P::BatchNorm(mode) => {
            let (mean, invstd) = match saved {
                Saved::BatchNormTrain { mean, invstd, .. } | Saved::Norm { mean, invstd } => {
                    (mean, invstd)
                }
                _ => unreachable!(),
            };
            let train = matches!(mode, BnMode::Train);
            let (dx, dg, db) = batch_norm_backward(
                inputs[0].shape(),
                inputs[0].data(),
                dy,
                mean,
                invstd,
                inputs[1].data(),
                train,
            );
            vec![
                need[0].then_some(dx),
                need[1].then_some(dg),
                need[2].then_some(db),
            ]
        }
        P::GroupNorm { groups } => {
            let Saved::Norm { mean, invstd } = saved else {
                unreachable!()
            };
            let (dx, dg, db) = group_norm_backward(
                inputs[0].shape(),
                inputs[0].data(),
                dy,
                *groups,
                mean,
                invstd,
                inputs[1].data(),
            );
            vec![
                need[0].then_some(dx),
                need[1].then_some(dg),
                need[2].then_some(db),
            ]
        }
        P::MaxPool(_) => {
            let Saved::MaxPool(arg) = saved else {
                unreachable!()
            };
            let mut dx = vec![0.0; inputs[0].len()];
            for (g, &j) in dy.iter().zip(arg) {
                dx[j] += g;
            }
            vec![Some(dx)]
        }
        P::AvgPool(p) => {
            let s = out.shape();
            vec![Some(avg_pool_backward(
                inputs[0].shape(),
                dy,
                *p,
                s[2],
                s[3],
            ))]
        }
        P::GlobalAvgPool => {
            let s = inputs[0].shape();
            let hw = s[2] * s[3];
            let mut dx = Vec::with_capacity(inputs[0].len());
            for g in dy {
                dx.extend(std::iter::repeat_n(g / hw as f64, hw));
            }
            vec![Some(dx)]
        }
        P::Softmax { axis } => vec![Some(softmax_backward(
            out.shape(),
            *axis,
            out.data(),
            dy,
            false,
        ))],
        P::LogSoftmax { axis } => vec![Some(softmax_backward(
            out.shape(),
            *axis,
            out.data(),
            dy,
            true,
        ))],
        P::Reshape(_) => vec![Some(dy.to_vec())],
        P::Sum => vec![Some(vec![dy[0]; inputs[0].len()])],
        P::Mean => vec![Some(vec![dy[0] / inputs[0].len() as f64; inputs[0].len()])],
        P::WeightedSum { row, cols } => {
            let w = inputs[0];
            let k = w.shape()[1];
            let mut grads = Vec::with_capacity(inputs.len());
            grads.push(need[0].then(|| {
                let mut dw = vec![0.0; w.len()];
                for (j, t) in inputs[1..].iter().enumerate() {
                    dw[row * k + cols[j]] +=
                        t.data().iter().zip(dy).map(|(a, b)| a * b).sum::<f64>();
                }
                dw
            }));
            for (j, &nd) in need[1..].iter().enumerate() {
                let c = w.data()[row * k + cols[j]];
                grads.push(nd.then(|| dy.iter().map(|g| g * c).collect()));
            }
            grads
        }
        P::Nll { labels, weights } => {
            let x = inputs[0];
            let c = x.shape()[1];
            let wsum: f64 = weights.iter().sum();
            let mut dx = vec![0.0; x.len()];
            for (i, (&y, &w)) in labels.iter().zip(weights).enumerate() {
                dx[i * c + y] = -w / wsum * dy[0];
            }
            vec![Some(dx)]
        }
    }
}

#[cfg(test)]
mod tests;
