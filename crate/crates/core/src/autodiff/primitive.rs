use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::kernels::{ConvAttrs, PoolAttrs};
use crate::error::{Error, Result};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// How a batchnorm node obtains its normalization statistics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum BnMode {
    /// Normalize with the batch's own per-channel moments.
    Train,
    /// Normalize with supplied running statistics.
    Eval { mean: Vec<f64>, var: Vec<f64> },
}

/// Every differentiable primitive the tape can record, with its attributes.
#[derive(Clone, Debug, PartialEq)]
pub enum Primitive {
    /// Inputs: `[x (N,Cin,H,W), kernel (Cout,Cin/g,k,k)]`.
    Conv2d(ConvAttrs),
    /// Inputs: `[a (M,K), b (K,N)]`.
    MatMul,
    Add,
    Sub,
    /// Multiply by a constant.
    Scale(f64),
    /// Elementwise product of equal shapes.
    Mul,
    /// `a + b` with `b` broadcast to `a`'s shape.
    BroadcastAdd,
    /// `a * b` with `b` broadcast to `a`'s shape.
    BroadcastMul,
    /// Channel-axis (axis 1) concatenation.
    Concat,
    /// Channel-axis slice `[start, start + len)`; one piece of a split.
    Split {
        start: usize,
        len: usize,
    },
    Relu,
    Sigmoid,
    Gelu,
    /// Inputs: `[x, gamma (C), beta (C)]`.
    BatchNorm(BnMode),
    /// Inputs: `[x, gamma (C), beta (C)]`; `groups == 1` is layer norm.
    GroupNorm {
        groups: usize,
    },
    MaxPool(PoolAttrs),
    AvgPool(PoolAttrs),
    /// `(N,C,H,W) -> (N,C)`.
    GlobalAvgPool,
    Softmax {
        axis: usize,
    },
    LogSoftmax {
        axis: usize,
    },
    Reshape(Vec<usize>),
    /// Sum of all entries to shape `[1]`.
    Sum,
    /// Mean of all entries to shape `[1]`.
    Mean,
    /// Inputs: `[weights (R,K), y_1 .. y_m]`; output `sum_j weights[row, cols[j]] * y_j`.
    WeightedSum {
        row: usize,
        cols: Vec<usize>,
    },
    /// Weighted negative log-likelihood of log-probabilities `(N,C)`:
    /// `-sum_i w_i logp[i, y_i] / sum_i w_i`.
    Nll {
        labels: Vec<usize>,
        weights: Vec<f64>,
    },
}

/// Named real-valued attributes for [`Primitive::from_name`].
pub type Attrs = BTreeMap<String, f64>;

fn attr(attrs: &Attrs, prim: &str, key: &str) -> Result<f64> {
    attrs
        .get(key)
        .copied()
        .ok_or_else(|| Error::InvalidArgument(format!("{prim} requires attribute `{key}`")))
}

fn attr_usize(attrs: &Attrs, prim: &str, key: &str) -> Result<usize> {
    let v = attr(attrs, prim, key)?;
    if v < 0.0 || v.fract() != 0.0 {
        return Err(Error::InvalidArgument(format!(
            "{prim} attribute `{key}` must be a nonnegative integer, got {v}"
        )));
    }
    Ok(v as usize)
}

fn attr_or(attrs: &Attrs, key: &str, default: usize) -> usize {
    attrs.get(key).map(|&v| v as usize).unwrap_or(default)
}

impl Primitive {
    pub fn name(&self) -> &'static str {
        match self {
            Primitive::Conv2d(_) => "conv2d",
            Primitive::MatMul => "matmul",
            Primitive::Add => "add",
            Primitive::Sub => "sub",
            Primitive::Scale(_) => "scale",
            Primitive::Mul => "mul",
            Primitive::BroadcastAdd => "broadcast_add",
            Primitive::BroadcastMul => "broadcast_mul",
            Primitive::Concat => "concat",
            Primitive::Split { .. } => "split",
            Primitive::Relu => "relu",
            Primitive::Sigmoid => "sigmoid",
            Primitive::Gelu => "gelu",
            Primitive::BatchNorm(_) => "batchnorm",
            Primitive::GroupNorm { .. } => "groupnorm",
            Primitive::MaxPool(_) => "max_pool",
            Primitive::AvgPool(_) => "avg_pool",
            Primitive::GlobalAvgPool => "global_avg_pool",
            Primitive::Softmax { .. } => "softmax",
            Primitive::LogSoftmax { .. } => "log_softmax",
            Primitive::Reshape(_) => "reshape",
            Primitive::Sum => "sum",
            Primitive::Mean => "mean",
            Primitive::WeightedSum { .. } => "weighted_sum",
            Primitive::Nll { .. } => "nll",
        }
    }

    /// Builds a primitive from its name and numeric attributes.
    ///
    /// Recognized attributes: `stride`, `padding`, `dilation`, `groups`,
    /// `kernel`, `axis`, `factor`, `start`, `len`.
    pub fn from_name(name: &str, attrs: &Attrs) -> Result<Self> {
        Ok(match name {
            "conv2d" => Primitive::Conv2d(ConvAttrs {
                stride: attr_or(attrs, "stride", 1),
                padding: attr_or(attrs, "padding", 0),
                dilation: attr_or(attrs, "dilation", 1),
                groups: attr_or(attrs, "groups", 1),
            }),
            "matmul" => Primitive::MatMul,
            "add" => Primitive::Add,
            "sub" => Primitive::Sub,
            "scale" => Primitive::Scale(attr(attrs, name, "factor")?),
            "mul" => Primitive::Mul,
            "broadcast_add" => Primitive::BroadcastAdd,
            "broadcast_mul" => Primitive::BroadcastMul,
            "concat" => Primitive::Concat,
            "split" => Primitive::Split {
                start: attr_usize(attrs, name, "start")?,
                len: attr_usize(attrs, name, "len")?,
            },
            "relu" => Primitive::Relu,
            "sigmoid" => Primitive::Sigmoid,
            "gelu" => Primitive::Gelu,
            "batchnorm" => Primitive::BatchNorm(BnMode::Train),
            "groupnorm" => Primitive::GroupNorm {
                groups: attr_usize(attrs, name, "groups")?,
            },
            "max_pool" | "avg_pool" => {
                let p = PoolAttrs {
                    kernel: attr_or(attrs, "kernel", 3),
                    stride: attr_or(attrs, "stride", 1),
                    padding: attr_or(attrs, "padding", 1),
                };
                if name == "max_pool" {
                    Primitive::MaxPool(p)
                } else {
                    Primitive::AvgPool(p)
                }
            }
            "global_avg_pool" => Primitive::GlobalAvgPool,
            "softmax" => Primitive::Softmax {
                axis: attr_usize(attrs, name, "axis")?,
            },
            "log_softmax" => Primitive::LogSoftmax {
                axis: attr_usize(attrs, name, "axis")?,
            },
            "sum" => Primitive::Sum,
            "mean" => Primitive::Mean,
            other => return Err(Error::UnknownPrimitive(other.to_string())),
        })
    }

    /// Names accepted by [`Primitive::from_name`].
    pub const NAMES: &'static [&'static str] = &[
        "conv2d",
        "matmul",
        "add",
        "sub",
        "scale",
        "mul",
        "broadcast_add",
        "broadcast_mul",
        "concat",
        "split",
        "relu",
        "sigmoid",
        "gelu",
        "batchnorm",
        "groupnorm",
        "max_pool",
        "avg_pool",
        "global_avg_pool",
        "softmax",
        "log_softmax",
        "sum",
        "mean",
    ];
}
