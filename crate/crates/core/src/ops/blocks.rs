//! Residual building blocks parameterized by topology, convolution design,
//! activation placement, activation kind and normalization.
//!
//! The two long-tail candidate operations are fixed points of this family;
//! the exploration harness sweeps the other settings one axis at a time.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{ConvAttrs, PoolAttrs, Var};
use crate::error::{Error, Result};
use crate::nn::{forward_seq, ActKind, Ctx, Layer, Linear, NormKind, ParamStore, PoolKind};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Topology {
    /// Two equal-width 3x3 stages.
    Basic,
    /// 1x1 reduce, transform, 1x1 expand.
    Bottleneck,
}

/// Design of the spatial transform stage.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConvDesign {
    Plain,
    /// Grouped 3x3 with up to `max_paths` groups.
    Aggregated {
        max_paths: usize,
    },
    /// Split into up to `max_scale` cascaded groups.
    Hierarchical {
        max_scale: usize,
    },
    /// Depthwise 3x3 followed by pointwise 1x1.
    Separable,
    /// 3x3 with dilation 2.
    Dilated,
    /// Plain transform followed by squeeze-and-excitation gating.
    SqueezeExcite {
        reduction: usize,
    },
}

impl ConvDesign {
    pub fn label(&self) -> &'static str {
        match self {
            ConvDesign::Plain => "plain",
            ConvDesign::Aggregated { .. } => "aggregated",
            ConvDesign::Hierarchical { .. } => "hierarchical",
            ConvDesign::Separable => "separable",
            ConvDesign::Dilated => "dilated",
            ConvDesign::SqueezeExcite { .. } => "se",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActPlacement {
    /// norm -> act -> conv
    Pre,
    /// conv -> norm -> act
    Post,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShortcutRule {
    /// Identity residual only when input and output shapes agree.
    WhenShapesMatch,
    /// Identity when shapes agree, otherwise a strided 1x1 projection.
    Projection,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockSpec {
    pub topology: Topology,
    pub conv: ConvDesign,
    pub placement: ActPlacement,
    pub act: ActKind,
    pub norm: NormKind,
    pub shortcut: ShortcutRule,
}

impl BlockSpec {
    /// ReLU/BatchNorm bottleneck with the given design and placement.
    pub fn bottleneck(conv: ConvDesign, placement: ActPlacement) -> Self {
        Self {
            topology: Topology::Bottleneck,
            conv,
            placement,
            act: ActKind::Relu,
            norm: NormKind::Batch,
            shortcut: ShortcutRule::WhenShapesMatch,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
enum HierFirst {
    Pass,
    Pool(Layer),
    Conv(Vec<Layer>),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
enum Transform {
    Chain(Vec<Layer>),
    Hier {
        widths: Vec<usize>,
        first: HierFirst,
        rest: Vec<Vec<Layer>>,
        cascade: bool,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct SqueezeExcite {
    squeeze: Linear,
    excite: Linear,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
enum Shortcut {
    None,
    Identity,
    Projection(Vec<Layer>),
}

/// Resolved internal widths of a block.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockStructure {
    pub mid_channels: usize,
    pub groups: Option<usize>,
    pub scale: Option<usize>,
    pub residual: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Block {
    pub spec: BlockSpec,
    pub c_in: usize,
    pub c_out: usize,
    pub stride: usize,
    pub structure: BlockStructure,
    head: Vec<Layer>,
    transform: Transform,
    tail: Vec<Layer>,
    se: Option<SqueezeExcite>,
    shortcut: Shortcut,
}

/// `min(cap, width)` groups, with `width` rounded down to a multiple of it.
pub fn clamp_groups(width: usize, cap: usize) -> (usize, usize) {
    let g = cap.min(width).max(1);
    (g, width / g * g)
}

struct Builder<'a, R: Rng + ?Sized> {
    store: &'a mut ParamStore,
    rng: &'a mut R,
    spec: BlockSpec,
    name: String,
    counter: usize,
}

impl<R: Rng + ?Sized> Builder<'_, R> {
    fn next_name(&mut self, what: &str) -> String {
        self.counter += 1;
        format!("{}.{}{}", self.name, what, self.counter)
    }

    fn conv(
        &mut self,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        attrs: ConvAttrs,
    ) -> Result<Layer> {
        let name = self.next_name("conv");
        Layer::conv(self.store, &name, c_in, c_out, kernel, attrs, self.rng)
    }

    fn norm(&mut self, channels: usize) -> Layer {
        let name = self.next_name("norm");
        Layer::norm(self.store, &name, self.spec.norm, channels)
    }

    /// One or more convolutions wrapped with norm and activation per the placement rule.
    fn unit(&mut self, convs: &[(usize, usize, usize, ConvAttrs)]) -> Result<Vec<Layer>> {
        let (c_first, c_last) = (convs[0].0, convs[convs.len() - 1].1);
        let mut layers = Vec::new();
        if self.spec.placement == ActPlacement::Pre {
            layers.push(self.norm(c_first));
            layers.push(Layer::Act(self.spec.act));
        }
        for &(ci, co, k, a) in convs {
            layers.push(self.conv(ci, co, k, a)?);
        }
        if self.spec.placement == ActPlacement::Post {
            layers.push(self.norm(c_last));
            layers.push(Layer::Act(self.spec.act));
        }
        Ok(layers)
    }

    fn unit3(
        &mut self,
        c_in: usize,
        c_out: usize,
        stride: usize,
        dilation: usize,
        groups: usize,
    ) -> Result<Vec<Layer>> {
        self.unit(&[(c_in, c_out, 3, ConvAttrs::same(3, stride, dilation, groups))])
    }

    fn unit1(&mut self, c_in: usize, c_out: usize) -> Result<Vec<Layer>> {
        self.unit(&[(c_in, c_out, 1, ConvAttrs::default())])
    }
}

impl Block {
    pub fn build<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        spec: BlockSpec,
        c_in: usize,
        c_out: usize,
        stride: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if c_in == 0 || c_out == 0 || !(1..=2).contains(&stride) {
            return Err(Error::Structure(format!(
                "{name}: invalid block {c_in}->{c_out} stride {stride}"
            )));
        }
        let mut b = Builder {
            store,
            rng,
            spec,
            name: name.to_string(),
            counter: 0,
        };
        let mut structure = BlockStructure::default();

        let (head, width_in, width_out) = match spec.topology {
            Topology::Bottleneck => {
                let mut mid = c_out / 2;
                match spec.conv {
                    ConvDesign::Aggregated { max_paths } => {
                        let (g, m) = clamp_groups(mid, max_paths);
                        structure.groups = Some(g);
                        mid = m;
                    }
                    ConvDesign::Hierarchical { max_scale } => {
                        let (s, m) = clamp_groups(mid, max_scale);
                        structure.scale = Some(s);
                        mid = m;
                    }
                    _ => {}
                }
                if mid == 0 {
                    return Err(Error::Structure(format!(
                        "{name}: {c_out} output channels leave no bottleneck width"
                    )));
                }
                (b.unit1(c_in, mid)?, mid, mid)
            }
            Topology::Basic => {
                if let ConvDesign::Aggregated { max_paths } = spec.conv {
                    let g = (1..=max_paths.min(c_in).min(c_out))
                        .rev()
                        .find(|g| c_in % g == 0 && c_out % g == 0)
                        .unwrap_or(1);
                    structure.groups = Some(g);
                }
                if let ConvDesign::Hierarchical { max_scale } = spec.conv {
                    if c_in != c_out {
                        return Err(Error::Structure(format!(
                            "{name}: hierarchical basic block needs equal widths, got {c_in}->{c_out}"
                        )));
                    }
                    structure.scale = Some(max_scale.min(c_in).max(1));
                }
                (Vec::new(), c_in, c_out)
            }
        };
        structure.mid_channels = width_in;

        let transform = match spec.conv {
            ConvDesign::Plain | ConvDesign::SqueezeExcite { .. } => {
                Transform::Chain(b.unit3(width_in, width_out, stride, 1, 1)?)
            }
            ConvDesign::Dilated => Transform::Chain(b.unit3(width_in, width_out, stride, 2, 1)?),
            ConvDesign::Aggregated { .. } => {
                let g = structure.groups.unwrap_or(1);
                Transform::Chain(b.unit3(width_in, width_out, stride, 1, g)?)
            }
            ConvDesign::Separable => Transform::Chain(b.unit(&[
                (
                    width_in,
                    width_in,
                    3,
                    ConvAttrs::same(3, stride, 1, width_in),
                ),
                (width_in, width_out, 1, ConvAttrs::default()),
            ])?),
            ConvDesign::Hierarchical { .. } => {
                let s = structure.scale.unwrap_or(1);
                let w = width_in / s;
                let mut widths = vec![w; s];
                // a non-divisible basic width puts the remainder in the last group
                widths[s - 1] += width_in - w * s;
                if s == 1 {
                    Transform::Hier {
                        first: HierFirst::Conv(b.unit3(widths[0], widths[0], stride, 1, 1)?),
                        widths,
                        rest: Vec::new(),
                        cascade: false,
                    }
                } else {
                    let first = if stride == 1 {
                        HierFirst::Pass
                    } else {
                        HierFirst::Pool(Layer::Pool {
                            kind: PoolKind::Avg,
                            attrs: PoolAttrs::same3(stride),
                        })
                    };
                    let mut rest = Vec::with_capacity(s - 1);
                    for &wi in &widths[1..] {
                        rest.push(b.unit3(wi, wi, stride, 1, 1)?);
                    }
                    Transform::Hier {
                        widths,
                        first,
                        rest,
                        cascade: stride == 1,
                    }
                }
            }
        };

        let tail = match spec.topology {
            Topology::Bottleneck => b.unit1(width_out, c_out)?,
            Topology::Basic => b.unit3(c_out, c_out, 1, 1, 1)?,
        };

        let se = if let ConvDesign::SqueezeExcite { reduction } = spec.conv {
            let hidden = (c_out / reduction.max(1)).max(1);
            let n1 = b.next_name("se_squeeze");
            let n2 = b.next_name("se_excite");
            Some(SqueezeExcite {
                squeeze: Linear::new(b.store, &n1, c_out, hidden, b.rng),
                excite: Linear::new(b.store, &n2, hidden, c_out, b.rng),
            })
        } else {
            None
        };

        let shapes_match = c_in == c_out && stride == 1;
        let shortcut = match (shapes_match, spec.shortcut) {
            (true, _) => Shortcut::Identity,
            (false, ShortcutRule::WhenShapesMatch) => Shortcut::None,
            (false, ShortcutRule::Projection) => {
                let conv = b.conv(
                    c_in,
                    c_out,
                    1,
                    ConvAttrs {
                        stride,
                        ..ConvAttrs::default()
                    },
                )?;
                let norm = b.norm(c_out);
                Shortcut::Projection(vec![conv, norm])
            }
        };
        structure.residual = !matches!(shortcut, Shortcut::None);

        Ok(Self {
            spec,
            c_in,
            c_out,
            stride,
            structure,
            head,
            transform,
            tail,
            se,
            shortcut,
        })
    }

    pub fn forward(&self, cx: &mut Ctx<'_>, x: Var) -> Result<Var> {
        let h = forward_seq(&self.head, cx, x)?;
        let h = match &self.transform {
            Transform::Chain(layers) => forward_seq(layers, cx, h)?,
            Transform::Hier {
                widths,
                first,
                rest,
                cascade,
            } => {
                let parts = cx.tape.split(h, widths)?;
                let mut outs = Vec::with_capacity(parts.len());
                let mut prev = match first {
                    HierFirst::Pass => parts[0],
                    HierFirst::Pool(l) => l.forward(cx, parts[0])?,
                    HierFirst::Conv(layers) => forward_seq(layers, cx, parts[0])?,
                };
                outs.push(prev);
                for (part, layers) in parts[1..].iter().zip(rest) {
                    let input = if *cascade && cx.tape.shape(*part) == cx.tape.shape(prev) {
                        cx.tape.add(*part, prev)?
                    } else {
                        *part
                    };
                    prev = forward_seq(layers, cx, input)?;
                    outs.push(prev);
                }
                if outs.len() == 1 {
                    outs[0]
                } else {
                    cx.tape.concat(&outs)?
                }
            }
        };
        let mut y = forward_seq(&self.tail, cx, h)?;
        if let Some(se) = &self.se {
            let shape = cx.tape.shape(y);
            let pooled = cx.tape.global_avg_pool(y)?;
            let z = se.squeeze.forward(cx, pooled)?;
            let z = cx.tape.relu(z)?;
            let z = se.excite.forward(cx, z)?;
            let z = cx.tape.sigmoid(z)?;
            let z = cx.tape.reshape(z, vec![shape[0], shape[1], 1, 1])?;
            y = cx.tape.broadcast_mul(y, z)?;
        }
        match &self.shortcut {
            Shortcut::None => Ok(y),
            Shortcut::Identity => cx.tape.add(y, x),
            Shortcut::Projection(layers) => {
                let s = forward_seq(layers, cx, x)?;
                cx.tape.add(y, s)
            }
        }
    }

    /// Flattened layer sequence in execution order.
    pub fn describe(&self) -> Vec<String> {
        let mut out: Vec<String> = self.head.iter().map(Layer::describe).collect();
        match &self.transform {
            Transform::Chain(layers) => out.extend(layers.iter().map(Layer::describe)),
            Transform::Hier {
                widths,
                first,
                rest,
                cascade,
            } => {
                out.push(format!("split{widths:?}"));
                match first {
                    HierFirst::Pass => out.push("branch1:identity".into()),
                    HierFirst::Pool(l) => out.push(format!("branch1:{}", l.describe())),
                    HierFirst::Conv(layers) => {
                        out.extend(layers.iter().map(|l| format!("branch1:{}", l.describe())))
                    }
                }
                for (i, layers) in rest.iter().enumerate() {
                    if *cascade {
                        out.push(format!("branch{}:add_prev", i + 2));
                    }
                    out.extend(
                        layers
                            .iter()
                            .map(|l| format!("branch{}:{}", i + 2, l.describe())),
                    );
                }
                if widths.len() > 1 {
                    out.push("concat".into());
                }
            }
        }
        out.extend(self.tail.iter().map(Layer::describe));
        if let Some(se) = &self.se {
            out.push(format!(
                "se({}->{}->{})",
                se.squeeze.d, se.squeeze.classes, se.excite.classes
            ));
        }
        match &self.shortcut {
            Shortcut::None => {}
            Shortcut::Identity => out.push("residual_add".into()),
            Shortcut::Projection(layers) => {
                out.extend(layers.iter().map(|l| format!("shortcut:{}", l.describe())));
                out.push("residual_add".into());
            }
        }
        out
    }
}
