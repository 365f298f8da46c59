//! The candidate-operation catalog searched on every cell edge.
//!
//! Catalog order is fixed:
//!
//! | index | tag            |
//! |-------|----------------|
//! | 0     | `zero`         |
//! | 1     | `skip_connect` |
//! | 2     | `max_pool_3x3` |
//! | 3     | `avg_pool_3x3` |
//! | 4     | `sep_conv_3x3` |
//! | 5     | `sep_conv_5x5` |
//! | 6     | `dil_conv_3x3` |
//! | 7     | `dil_conv_5x5` |
//! | 8     | `lt_agg_conv`  |
//! | 9     | `lt_hier_conv` |
//!
//! `lt_agg_conv` is a pre-activated bottleneck whose 3x3 stage is a grouped
//! ("multi-path") convolution; `lt_hier_conv` is a post-activated bottleneck
//! whose 3x3 stage splits channels into cascaded groups. Both add an identity
//! residual when shapes allow.

pub mod blocks;

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{ConvAttrs, PoolAttrs, Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{forward_seq, ActKind, Ctx, Layer, Mode, NormKind, ParamStore, PoolKind};
use crate::tensor::Tensor;
use blocks::{ActPlacement, Block, BlockSpec, ConvDesign};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "&'static str")]
pub enum OpKind {
    Zero,
    SkipConnect,
    MaxPool3x3,
    AvgPool3x3,
    SepConv3x3,
    SepConv5x5,
    DilConv3x3,
    DilConv5x5,
    LtAggConv,
    LtHierConv,
}

impl OpKind {
    pub const ALL: [OpKind; 10] = [
        OpKind::Zero,
        OpKind::SkipConnect,
        OpKind::MaxPool3x3,
        OpKind::AvgPool3x3,
        OpKind::SepConv3x3,
        OpKind::SepConv5x5,
        OpKind::DilConv3x3,
        OpKind::DilConv5x5,
        OpKind::LtAggConv,
        OpKind::LtHierConv,
    ];

    pub fn tag(self) -> &'static str {
        match self {
            OpKind::Zero => "zero",
            OpKind::SkipConnect => "skip_connect",
            OpKind::MaxPool3x3 => "max_pool_3x3",
            OpKind::AvgPool3x3 => "avg_pool_3x3",
            OpKind::SepConv3x3 => "sep_conv_3x3",
            OpKind::SepConv5x5 => "sep_conv_5x5",
            OpKind::DilConv3x3 => "dil_conv_3x3",
            OpKind::DilConv5x5 => "dil_conv_5x5",
            OpKind::LtAggConv => "lt_agg_conv",
            OpKind::LtHierConv => "lt_hier_conv",
        }
    }

    pub fn catalog_index(self) -> usize {
        OpKind::ALL.iter().position(|&k| k == self).unwrap()
    }

    /// Smallest spatial extent accepted. Larger kernels rely on same-padding.
    pub fn min_extent(self) -> usize {
        match self {
            OpKind::Zero | OpKind::SkipConnect => 1,
            _ => 3,
        }
    }
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl TryFrom<String> for OpKind {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<OpKind> for &'static str {
    fn from(k: OpKind) -> Self {
        k.tag()
    }
}

impl FromStr for OpKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        OpKind::ALL
            .iter()
            .copied()
            .find(|k| k.tag() == s)
            .ok_or_else(|| Error::UnknownOp(s.to_string()))
    }
}

/// An ordered subset of [`OpKind::ALL`].
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Catalog(Vec<OpKind>);

impl Catalog {
    pub fn full() -> Self {
        Self(OpKind::ALL.to_vec())
    }

    /// The eight conventional DARTS candidates, without the long-tail operations.
    pub fn vanilla() -> Self {
        Self(OpKind::ALL[..8].to_vec())
    }

    /// Subset selected by tag; kept in catalog order, duplicates rejected.
    pub fn from_names<S: AsRef<str>>(names: &[S]) -> Result<Self> {
        let mut kinds = names
            .iter()
            .map(|n| n.as_ref().parse::<OpKind>())
            .collect::<Result<Vec<_>>>()?;
        kinds.sort();
        let before = kinds.len();
        kinds.dedup();
        if kinds.len() != before {
            return Err(Error::InvalidArgument(
                "duplicate operation in catalog".into(),
            ));
        }
        if kinds.is_empty() {
            return Err(Error::InvalidArgument("empty catalog".into()));
        }
        Ok(Self(kinds))
    }

    pub fn kinds(&self) -> &[OpKind] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn names(&self) -> Vec<String> {
        self.0.iter().map(|k| k.tag().to_string()).collect()
    }

    pub fn position(&self, kind: OpKind) -> Option<usize> {
        self.0.iter().position(|&k| k == kind)
    }
}

/// Caps for the long-tail operations' internal widths.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct OpOptions {
    /// Upper bound on the aggregated convolution's group count.
    pub max_paths: usize,
    /// Upper bound on the hierarchical convolution's scale.
    pub max_scale: usize,
}

impl Default for OpOptions {
    fn default() -> Self {
        Self {
            max_paths: 32,
            max_scale: 8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
enum OpBody {
    Zero,
    Identity,
    Chain(Vec<Layer>),
    Block(Box<Block>),
}

/// Resolved internal hyperparameters of an operation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct OpStructure {
    pub groups: Option<usize>,
    pub scale: Option<usize>,
    pub mid_channels: Option<usize>,
    pub residual: bool,
}

/// A built operation whose parameters live in an external [`ParamStore`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Op {
    pub kind: OpKind,
    pub c_in: usize,
    pub c_out: usize,
    pub stride: usize,
    pub structure: OpStructure,
    body: OpBody,
}

fn relu() -> Layer {
    Layer::Act(ActKind::Relu)
}

impl Op {
    pub fn build<R: rand::Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        kind: OpKind,
        c_in: usize,
        c_out: usize,
        stride: usize,
        options: &OpOptions,
        rng: &mut R,
    ) -> Result<Self> {
        if c_in == 0 || c_out == 0 {
            return Err(Error::Structure(format!(
                "{name}: channel counts must be positive"
            )));
        }
        if !(1..=2).contains(&stride) {
            return Err(Error::Structure(format!(
                "{name}: stride must be 1 or 2, got {stride}"
            )));
        }
        let same_width = |what: &str| -> Result<()> {
            if c_in != c_out {
                Err(Error::Structure(format!(
                    "{name}: {what} needs c_in == c_out, got {c_in}->{c_out}"
                )))
            } else {
                Ok(())
            }
        };
        let conv = |store: &mut ParamStore, rng: &mut R, suffix: &str, ci, co, k, attrs| {
            Layer::conv(store, &format!("{name}.{suffix}"), ci, co, k, attrs, rng)
        };
        let bn = |store: &mut ParamStore, suffix: &str, c| {
            Layer::norm(store, &format!("{name}.{suffix}"), NormKind::Batch, c)
        };

        let mut structure = OpStructure::default();
        let body = match kind {
            OpKind::Zero => OpBody::Zero,
            OpKind::SkipConnect if stride == 1 && c_in == c_out => OpBody::Identity,
            OpKind::SkipConnect => OpBody::Chain(vec![
                relu(),
                conv(
                    store,
                    rng,
                    "reduce",
                    c_in,
                    c_out,
                    1,
                    ConvAttrs {
                        stride,
                        ..ConvAttrs::default()
                    },
                )?,
                bn(store, "bn", c_out),
            ]),
            OpKind::MaxPool3x3 | OpKind::AvgPool3x3 => {
                same_width("pooling")?;
                OpBody::Chain(vec![Layer::Pool {
                    kind: if kind == OpKind::MaxPool3x3 {
                        PoolKind::Max
                    } else {
                        PoolKind::Avg
                    },
                    attrs: PoolAttrs::same3(stride),
                }])
            }
            OpKind::SepConv3x3 | OpKind::SepConv5x5 => {
                let k = if kind == OpKind::SepConv3x3 { 3 } else { 5 };
                OpBody::Chain(vec![
                    relu(),
                    conv(
                        store,
                        rng,
                        "dw1",
                        c_in,
                        c_in,
                        k,
                        ConvAttrs::same(k, stride, 1, c_in),
                    )?,
                    conv(store, rng, "pw1", c_in, c_in, 1, ConvAttrs::default())?,
                    bn(store, "bn1", c_in),
                    relu(),
                    conv(
                        store,
                        rng,
                        "dw2",
                        c_in,
                        c_in,
                        k,
                        ConvAttrs::same(k, 1, 1, c_in),
                    )?,
                    conv(store, rng, "pw2", c_in, c_out, 1, ConvAttrs::default())?,
                    bn(store, "bn2", c_out),
                ])
            }
            OpKind::DilConv3x3 | OpKind::DilConv5x5 => {
                let k = if kind == OpKind::DilConv3x3 { 3 } else { 5 };
                OpBody::Chain(vec![
                    relu(),
                    conv(
                        store,
                        rng,
                        "dw",
                        c_in,
                        c_in,
                        k,
                        ConvAttrs::same(k, stride, 2, c_in),
                    )?,
                    conv(store, rng, "pw", c_in, c_out, 1, ConvAttrs::default())?,
                    bn(store, "bn", c_out),
                ])
            }
            OpKind::LtAggConv | OpKind::LtHierConv => {
                let spec = if kind == OpKind::LtAggConv {
                    BlockSpec::bottleneck(
                        ConvDesign::Aggregated {
                            max_paths: options.max_paths,
                        },
                        ActPlacement::Pre,
                    )
                } else {
                    BlockSpec::bottleneck(
                        ConvDesign::Hierarchical {
                            max_scale: options.max_scale,
                        },
                        ActPlacement::Post,
                    )
                };
                let block = Block::build(store, name, spec, c_in, c_out, stride, rng)?;
                structure.groups = block.structure.groups;
                structure.scale = block.structure.scale;
                structure.mid_channels = Some(block.structure.mid_channels);
                structure.residual = block.structure.residual;
                OpBody::Block(Box::new(block))
            }
        };
        if matches!(body, OpBody::Identity) {
            structure.residual = false;
        }
        Ok(Self {
            kind,
            c_in,
            c_out,
            stride,
            structure,
            body,
        })
    }

    pub fn is_zero(&self) -> bool {
        matches!(self.body, OpBody::Zero)
    }

    /// Output shape for an `(N, c_in, H, W)` input.
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        if input.len() != 4 || input[1] != self.c_in {
            return Err(Error::InvalidShape {
                op: "apply_op",
                shape: input.to_vec(),
                reason: format!("{} expects (N, {}, H, W)", self.kind, self.c_in),
            });
        }
        let min = self.kind.min_extent();
        if input[2] < min || input[3] < min {
            return Err(Error::InvalidShape {
                op: "apply_op",
                shape: input.to_vec(),
                reason: format!("spatial size below kernel support ({min}) of {}", self.kind),
            });
        }
        let s = self.stride;
        Ok(vec![
            input[0],
            self.c_out,
            (input[2] - 1) / s + 1,
            (input[3] - 1) / s + 1,
        ])
    }

    pub fn forward(&self, cx: &mut Ctx<'_>, x: Var) -> Result<Var> {
        let out_shape = self.output_shape(&cx.tape.shape(x))?;
        match &self.body {
            OpBody::Zero => Ok(cx.tape.constant(Tensor::zeros(out_shape))),
            OpBody::Identity => Ok(x),
            OpBody::Chain(layers) => forward_seq(layers, cx, x),
            OpBody::Block(b) => b.forward(cx, x),
        }
    }

    pub fn layers(&self) -> Vec<String> {
        match &self.body {
            OpBody::Zero => vec!["zero".into()],
            OpBody::Identity => vec!["identity".into()],
            OpBody::Chain(layers) => layers.iter().map(Layer::describe).collect(),
            OpBody::Block(b) => b.describe(),
        }
    }
}

/// A self-contained operation: structure plus its own parameters and buffers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OpInstance {
    pub op: Op,
    pub params: ParamStore,
}

impl OpInstance {
    pub fn kind(&self) -> OpKind {
        self.op.kind
    }

    pub fn structure(&self) -> OpStructure {
        self.op.structure
    }

    /// Forward on an existing tape, binding this instance's parameters.
    pub fn forward_on(
        &mut self,
        tape: &Tape,
        x: Var,
        mode: Mode,
        trainable: bool,
    ) -> Result<(Var, Vec<Var>)> {
        let vars = self.params.bind(tape, trainable);
        let mut cx = Ctx::new(tape, &vars, &mut self.params, mode);
        let y = self.op.forward(&mut cx, x)?;
        Ok((y, vars))
    }
}

/// Builds an operation with default width caps, deterministically from `seed`.
pub fn build_op(
    kind: OpKind,
    c_in: usize,
    c_out: usize,
    stride: usize,
    seed: u64,
) -> Result<OpInstance> {
    build_op_with(kind, c_in, c_out, stride, seed, &OpOptions::default())
}

pub fn build_op_with(
    kind: OpKind,
    c_in: usize,
    c_out: usize,
    stride: usize,
    seed: u64,
    options: &OpOptions,
) -> Result<OpInstance> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ParamStore::new();
    let op = Op::build(
        &mut params,
        kind.tag(),
        kind,
        c_in,
        c_out,
        stride,
        options,
        &mut rng,
    )?;
    Ok(OpInstance { op, params })
}

/// Applies an operation to a concrete batch. Train mode updates running statistics.
pub fn apply_op(op: &mut OpInstance, x: &Tensor, mode: Mode) -> Result<Tensor> {
    let tape = Tape::new();
    let xv = tape.constant(x.clone());
    let (y, _) = op.forward_on(&tape, xv, mode, false)?;
    let out = tape.value(y).clone();
    Ok(out)
}

/// Layer sequence, resolved widths and parameter count of an operation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StructureReport {
    pub kind: OpKind,
    pub c_in: usize,
    pub c_out: usize,
    pub stride: usize,
    pub structure: OpStructure,
    pub layers: Vec<String>,
    pub parameter_count: usize,
}

pub fn describe_structure(op: &OpInstance) -> StructureReport {
    StructureReport {
        kind: op.op.kind,
        c_in: op.op.c_in,
        c_out: op.op.c_out,
        stride: op.op.stride,
        structure: op.op.structure,
        layers: op.op.layers(),
        parameter_count: op.params.scalar_count(),
    }
}
