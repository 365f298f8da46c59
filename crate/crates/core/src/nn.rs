//! Parameter storage, forward context and the small layer vocabulary shared by
//! candidate operations, cells and backbones.

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{BnMode, ConvAttrs, PoolAttrs, Tape, Var, BN_MOMENTUM};
use crate::error::{Error, Result};
use crate::tensor::{hash_into, hex, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ParamId(pub usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct StatsId(pub usize);

/// Running batchnorm statistics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl RunningStats {
    pub fn new(channels: usize) -> Self {
        Self {
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
}

/// Trainable tensors plus non-trainable normalization buffers of one model.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamStore {
    params: Vec<Param>,
    stats: Vec<RunningStats>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.params.push(Param {
            name: name.into(),
            value: value.with_requires_grad(true),
        });
        ParamId(self.params.len() - 1)
    }

    pub fn add_stats(&mut self, channels: usize) -> StatsId {
        self.stats.push(RunningStats::new(channels));
        StatsId(self.stats.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn stats(&self, id: StatsId) -> &RunningStats {
        &self.stats[id.0]
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Number of trainable scalars.
    pub fn scalar_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Puts every parameter on `tape`, as gradient-receiving leaves when `trainable`.
    pub fn bind(&self, tape: &Tape, trainable: bool) -> Vec<Var> {
        self.params
            .iter()
            .map(|p| tape.leaf(p.value.clone().with_requires_grad(trainable)))
            .collect()
    }

    /// Like [`ParamStore::bind`], choosing per parameter whether it receives gradients.
    pub fn bind_with(&self, tape: &Tape, trainable: impl Fn(ParamId) -> bool) -> Vec<Var> {
        self.params
            .iter()
            .enumerate()
            .map(|(i, p)| tape.leaf(p.value.clone().with_requires_grad(trainable(ParamId(i)))))
            .collect()
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    /// Hash over all parameter values (buffers excluded).
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        for p in &self.params {
            h.update(p.name.as_bytes());
            hash_into(&mut h, &p.value);
        }
        hex(&h.finalize())
    }

    /// Resets every running statistic to its initial value.
    pub fn reset_stats(&mut self) {
        for s in &mut self.stats {
            *s = RunningStats::new(s.mean.len());
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mode {
    Train,
    Eval,
}

/// Per-forward state: the tape, bound parameter handles and normalization buffers.
pub struct Ctx<'a> {
    pub tape: &'a Tape,
    pub mode: Mode,
    vars: &'a [Var],
    stats: &'a mut [RunningStats],
    update_stats: bool,
}

impl<'a> Ctx<'a> {
    pub fn new(tape: &'a Tape, vars: &'a [Var], store: &'a mut ParamStore, mode: Mode) -> Self {
        Self {
            tape,
            mode,
            vars,
            stats: &mut store.stats,
            update_stats: mode == Mode::Train,
        }
    }

    /// Train-mode forward that leaves running statistics untouched (probe and
    /// architecture-gradient passes).
    pub fn frozen_stats(mut self) -> Self {
        self.update_stats = false;
        self
    }

    pub fn p(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    fn batch_norm(&mut self, x: Var, gamma: ParamId, beta: ParamId, stats: StatsId) -> Result<Var> {
        let (g, b) = (self.p(gamma), self.p(beta));
        match self.mode {
            Mode::Train => {
                let (y, batch) = self.tape.batch_norm(x, g, b, BnMode::Train)?;
                if self.update_stats {
                    let batch = batch.expect("train-mode batchnorm reports moments");
                    let s = &mut self.stats[stats.0];
                    let unbias = if batch.count > 1 {
                        batch.count as f64 / (batch.count - 1) as f64
                    } else {
                        1.0
                    };
                    for c in 0..s.mean.len() {
                        s.mean[c] = (1.0 - BN_MOMENTUM) * s.mean[c] + BN_MOMENTUM * batch.mean[c];
                        s.var[c] =
                            (1.0 - BN_MOMENTUM) * s.var[c] + BN_MOMENTUM * batch.var[c] * unbias;
                    }
                }
                Ok(y)
            }
            Mode::Eval => {
                let s = &self.stats[stats.0];
                let mode = BnMode::Eval {
                    mean: s.mean.clone(),
                    var: s.var.clone(),
                };
                Ok(self.tape.batch_norm(x, g, b, mode)?.0)
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActKind {
    Relu,
    Sigmoid,
    Gelu,
}

impl ActKind {
    pub fn name(self) -> &'static str {
        match self {
            ActKind::Relu => "relu",
            ActKind::Sigmoid => "sigmoid",
            ActKind::Gelu => "gelu",
        }
    }

    pub fn apply(self, tape: &Tape, x: Var) -> Result<Var> {
        match self {
            ActKind::Relu => tape.relu(x),
            ActKind::Sigmoid => tape.sigmoid(x),
            ActKind::Gelu => tape.gelu(x),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormKind {
    Batch,
    Layer,
    Group,
}

impl NormKind {
    pub fn name(self) -> &'static str {
        match self {
            NormKind::Batch => "bn",
            NormKind::Layer => "ln",
            NormKind::Group => "gn",
        }
    }

    /// Largest group count `<= 8` dividing `channels`.
    pub fn group_count(channels: usize) -> usize {
        (1..=channels.min(8))
            .rev()
            .find(|g| channels % g == 0)
            .unwrap_or(1)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoolKind {
    Max,
    Avg,
}

/// One step of a sequential chain.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Layer {
    Conv {
        weight: ParamId,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        attrs: ConvAttrs,
    },
    Norm {
        kind: NormKind,
        channels: usize,
        gamma: ParamId,
        beta: ParamId,
        stats: StatsId,
    },
    Act(ActKind),
    Pool {
        kind: PoolKind,
        attrs: PoolAttrs,
    },
}

/// Kaiming-normal fan-in initialization.
pub fn kaiming<R: Rng + ?Sized>(shape: Vec<usize>, fan_in: usize, rng: &mut R) -> Tensor {
    Tensor::randn(shape, (2.0 / fan_in as f64).sqrt(), rng)
}

impl Layer {
    pub fn conv<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        attrs: ConvAttrs,
        rng: &mut R,
    ) -> Result<Self> {
        if c_in % attrs.groups != 0 || c_out % attrs.groups != 0 {
            return Err(Error::Structure(format!(
                "{name}: {} groups do not divide {c_in}->{c_out} channels",
                attrs.groups
            )));
        }
        let cin_g = c_in / attrs.groups;
        let w = kaiming(
            vec![c_out, cin_g, kernel, kernel],
            cin_g * kernel * kernel,
            rng,
        );
        Ok(Layer::Conv {
            weight: store.add(format!("{name}.weight"), w),
            c_in,
            c_out,
            kernel,
            attrs,
        })
    }

    pub fn norm(store: &mut ParamStore, name: &str, kind: NormKind, channels: usize) -> Self {
        Layer::Norm {
            kind,
            channels,
            gamma: store.add(format!("{name}.gamma"), Tensor::full(vec![channels], 1.0)),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(vec![channels])),
            stats: store.add_stats(channels),
        }
    }

    pub fn forward(&self, cx: &mut Ctx<'_>, x: Var) -> Result<Var> {
        match self {
            Layer::Conv { weight, attrs, .. } => cx.tape.conv2d(x, cx.p(*weight), *attrs),
            Layer::Norm {
                kind,
                channels,
                gamma,
                beta,
                stats,
            } => match kind {
                NormKind::Batch => cx.batch_norm(x, *gamma, *beta, *stats),
                NormKind::Layer => cx.tape.group_norm(x, cx.p(*gamma), cx.p(*beta), 1),
                NormKind::Group => cx.tape.group_norm(
                    x,
                    cx.p(*gamma),
                    cx.p(*beta),
                    NormKind::group_count(*channels),
                ),
            },
            Layer::Act(a) => a.apply(cx.tape, x),
            Layer::Pool { kind, attrs } => match kind {
                PoolKind::Max => cx.tape.max_pool(x, *attrs),
                PoolKind::Avg => cx.tape.avg_pool(x, *attrs),
            },
        }
    }

    /// Short human-readable description, e.g. `conv3x3(8->8,s2,d1,g8)`.
    pub fn describe(&self) -> String {
        match self {
            Layer::Conv {
                c_in,
                c_out,
                kernel,
                attrs,
                ..
            } => format!(
                "conv{kernel}x{kernel}({c_in}->{c_out},s{},d{},g{})",
                attrs.stride, attrs.dilation, attrs.groups
            ),
            Layer::Norm { kind, channels, .. } => format!("{}({channels})", kind.name()),
            Layer::Act(a) => a.name().to_string(),
            Layer::Pool { kind, attrs } => format!(
                "{}pool{}x{}(s{})",
                match kind {
                    PoolKind::Max => "max",
                    PoolKind::Avg => "avg",
                },
                attrs.kernel,
                attrs.kernel,
                attrs.stride
            ),
        }
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        match self {
            Layer::Conv { weight, .. } => vec![*weight],
            Layer::Norm { gamma, beta, .. } => vec![*gamma, *beta],
            _ => Vec::new(),
        }
    }
}

pub fn forward_seq(layers: &[Layer], cx: &mut Ctx<'_>, mut x: Var) -> Result<Var> {
    for l in layers {
        x = l.forward(cx, x)?;
    }
    Ok(x)
}

/// Dense classifier head: `logits = features . W + b`, `W` laid out `(d, C)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub d: usize,
    pub classes: usize,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        d: usize,
        classes: usize,
        rng: &mut R,
    ) -> Self {
        let bound = 1.0 / (d as f64).sqrt();
        Self {
            weight: store.add(
                format!("{name}.weight"),
                Tensor::uniform(vec![d, classes], bound, rng),
            ),
            bias: store.add(
                format!("{name}.bias"),
                Tensor::uniform(vec![classes], bound, rng),
            ),
            d,
            classes,
        }
    }

    pub fn forward(&self, cx: &Ctx<'_>, features: Var) -> Result<Var> {
        let y = cx.tape.matmul(features, cx.p(self.weight))?;
        cx.tape.broadcast_add(y, cx.p(self.bias))
    }
}

/// Shape of a tensor after a `stride` same-padded 3x3 window.
pub fn strided_extent(extent: usize, stride: usize) -> usize {
    (extent - 1) / stride + 1
}
