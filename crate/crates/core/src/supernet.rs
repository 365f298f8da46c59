//! Searchable cells, the stacked network and discrete genotypes.
//!
//! A cell has two input states (the outputs of the two previous cells) and
//! `n_nodes` intermediate nodes. Node `i` (state index `i + 2`) sums one edge
//! from every earlier state; the cell output concatenates the intermediate
//! nodes along channels. In the search network every edge mixes all catalog
//! operations with softmax weights; a genotype keeps two edges per node with a
//! single operation each.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{ConvAttrs, Tape, Var};
use crate::error::{Error, Result};
use crate::etf::{build_etf, EtfWeights};
use crate::nn::{forward_seq, ActKind, Ctx, Layer, Linear, Mode, NormKind, ParamId, ParamStore};
use crate::ops::{Catalog, Op, OpKind, OpOptions};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassifierKind {
    Trainable,
    Etf,
}

impl fmt::Display for ClassifierKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ClassifierKind::Trainable => "trainable",
            ClassifierKind::Etf => "etf",
        })
    }
}

impl FromStr for ClassifierKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "trainable" => Ok(ClassifierKind::Trainable),
            "etf" => Ok(ClassifierKind::Etf),
            other => Err(Error::InvalidArgument(format!(
                "unknown classifier {other:?} (expected trainable or etf)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ArchConfig {
    pub n_cells: usize,
    pub init_channels: usize,
    pub n_nodes: usize,
    /// Reduction cell indices; defaults to `n_cells / 3` and `2 * n_cells / 3`.
    pub reductions: Option<Vec<usize>>,
    pub stem_multiplier: usize,
    /// Candidate operation tags, kept in catalog order.
    pub ops: Vec<String>,
    pub max_paths: usize,
    pub max_scale: usize,
    /// Squared column norm of the fixed classifier.
    pub etf_energy: f64,
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self {
            n_cells: 5,
            init_channels: 8,
            n_nodes: 4,
            reductions: None,
            stem_multiplier: 3,
            ops: Catalog::full().names(),
            max_paths: 32,
            max_scale: 8,
            etf_energy: 1.0,
        }
    }
}

impl ArchConfig {
    pub fn reduction_cells(&self) -> Result<Vec<usize>> {
        let mut r = match &self.reductions {
            Some(r) => r.clone(),
            None => vec![self.n_cells / 3, 2 * self.n_cells / 3],
        };
        r.sort_unstable();
        r.dedup();
        if let Some(&bad) = r.iter().find(|&&i| i >= self.n_cells) {
            return Err(Error::Config(format!(
                "reduction cell {bad} out of range for {} cells",
                self.n_cells
            )));
        }
        Ok(r)
    }

    pub fn catalog(&self) -> Result<Catalog> {
        Catalog::from_names(&self.ops)
    }

    pub fn op_options(&self) -> OpOptions {
        OpOptions {
            max_paths: self.max_paths,
            max_scale: self.max_scale,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_cells == 0
            || self.init_channels == 0
            || self.n_nodes == 0
            || self.stem_multiplier == 0
        {
            return Err(Error::Config("arch sizes must be positive".into()));
        }
        if self.max_paths == 0 || self.max_scale == 0 {
            return Err(Error::Config(
                "arch.max_paths and arch.max_scale must be positive".into(),
            ));
        }
        if !(self.etf_energy > 0.0) {
            return Err(Error::Config("arch.etf_energy must be positive".into()));
        }
        self.reduction_cells()?;
        self.catalog()?;
        Ok(())
    }

    /// Channel width of the pooled features.
    pub fn feature_dim(&self) -> Result<usize> {
        let r = self.reduction_cells()?;
        Ok(self.n_nodes * self.init_channels << r.len())
    }
}

/// Number of edges in a cell with `n_nodes` intermediate nodes.
pub fn edge_count(n_nodes: usize) -> usize {
    n_nodes * (n_nodes + 3) / 2
}

/// Row of edge `source -> node` in the architecture tensors (`node` is a state index, `>= 2`).
pub fn edge_index(node: usize, source: usize) -> usize {
    (node - 2) * (node + 1) / 2 + source
}

/// `(node, source)` for every edge, in row order.
pub fn edges(n_nodes: usize) -> Vec<(usize, usize)> {
    (2..n_nodes + 2)
        .flat_map(|node| (0..node).map(move |s| (node, s)))
        .collect()
}

fn softmax_row(row: &[f64]) -> Vec<f64> {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

/// Architecture logits: one `(edges, |O|)` matrix per cell type.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArchParams {
    pub ops: Vec<OpKind>,
    pub n_nodes: usize,
    pub normal: Tensor,
    pub reduce: Tensor,
}

/// Architecture parameters and their softmax weights on a tape.
#[derive(Clone, Copy, Debug)]
pub struct ArchVars {
    pub normal: Var,
    pub reduce: Var,
    pub w_normal: Var,
    pub w_reduce: Var,
}

impl ArchParams {
    pub fn zeros(n_nodes: usize, catalog: &Catalog) -> Self {
        let shape = vec![edge_count(n_nodes), catalog.len()];
        Self {
            ops: catalog.kinds().to_vec(),
            n_nodes,
            normal: Tensor::zeros(shape.clone()),
            reduce: Tensor::zeros(shape),
        }
    }

    /// Small Gaussian initialization (std `1e-3`).
    pub fn random(n_nodes: usize, catalog: &Catalog, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let shape = vec![edge_count(n_nodes), catalog.len()];
        Self {
            ops: catalog.kinds().to_vec(),
            n_nodes,
            normal: Tensor::randn(shape.clone(), 1e-3, &mut rng),
            reduce: Tensor::randn(shape, 1e-3, &mut rng),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let shape = [edge_count(self.n_nodes), self.ops.len()];
        for t in [&self.normal, &self.reduce] {
            if t.shape() != shape {
                return Err(Error::ShapeMismatch {
                    op: "arch_params",
                    lhs: t.shape().to_vec(),
                    rhs: shape.to_vec(),
                });
            }
            if !t.is_finite() {
                return Err(Error::NonFinite("architecture parameters".into()));
            }
        }
        Ok(())
    }

    pub fn tensor(&self, reduction: bool) -> &Tensor {
        if reduction {
            &self.reduce
        } else {
            &self.normal
        }
    }

    /// Softmax of every edge row.
    pub fn mixing_weights(&self, reduction: bool) -> Vec<Vec<f64>> {
        let t = self.tensor(reduction);
        t.data().chunks(self.ops.len()).map(softmax_row).collect()
    }

    pub fn bind(&self, tape: &Tape, trainable: bool) -> Result<ArchVars> {
        let normal = tape.leaf(self.normal.clone().with_requires_grad(trainable));
        let reduce = tape.leaf(self.reduce.clone().with_requires_grad(trainable));
        Ok(ArchVars {
            normal,
            reduce,
            w_normal: tape.softmax(normal, 1)?,
            w_reduce: tape.softmax(reduce, 1)?,
        })
    }

    pub fn tensors_mut(&mut self) -> [&mut Tensor; 2] {
        [&mut self.normal, &mut self.reduce]
    }

    /// Flattened `[normal, reduce]` values.
    pub fn flat(&self) -> Vec<f64> {
        self.normal
            .data()
            .iter()
            .chain(self.reduce.data())
            .copied()
            .collect()
    }

    pub fn set_flat(&mut self, v: &[f64]) {
        let n = self.normal.len();
        self.normal.data_mut().copy_from_slice(&v[..n]);
        self.reduce.data_mut().copy_from_slice(&v[n..]);
    }

    pub fn content_hash(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        crate::tensor::hash_into(&mut h, &self.normal);
        crate::tensor::hash_into(&mut h, &self.reduce);
        crate::tensor::hex(&h.finalize())
    }
}

/// A retained edge: `[node, source, op]`, with `node` a state index.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GeneEdge(pub usize, pub usize, pub OpKind);

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenotypeMeta {
    pub seed: u64,
    pub epoch: usize,
    pub config_hash: String,
}

/// Discrete architecture: two retained edges per intermediate node per cell type.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Genotype {
    pub normal: Vec<GeneEdge>,
    pub reduce: Vec<GeneEdge>,
    pub meta: GenotypeMeta,
}

impl Genotype {
    pub fn cell(&self, reduction: bool) -> &[GeneEdge] {
        if reduction {
            &self.reduce
        } else {
            &self.normal
        }
    }

    pub fn n_nodes(&self) -> usize {
        self.normal.len() / 2
    }

    pub fn validate(&self, n_nodes: usize) -> Result<()> {
        for (name, cell) in [("normal", &self.normal), ("reduce", &self.reduce)] {
            for node in 2..n_nodes + 2 {
                let incoming: Vec<_> = cell.iter().filter(|g| g.0 == node).collect();
                if incoming.len() != 2 {
                    return Err(Error::Genotype(format!(
                        "{name} node {node} has {} edges, expected 2",
                        incoming.len()
                    )));
                }
                if incoming[0].1 == incoming[1].1 {
                    return Err(Error::Genotype(format!(
                        "{name} node {node} repeats source {}",
                        incoming[0].1
                    )));
                }
            }
            for g in cell {
                if g.0 < 2 || g.0 >= n_nodes + 2 || g.1 >= g.0 {
                    return Err(Error::Genotype(format!(
                        "{name} edge {g:?} does not fit {n_nodes} nodes"
                    )));
                }
                if g.2 == OpKind::Zero {
                    return Err(Error::Genotype(format!(
                        "{name} edge {g:?} keeps the zero operation"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Fraction of normal-cell edges that are `skip_connect`.
    pub fn skip_fraction(&self) -> f64 {
        if self.normal.is_empty() {
            return 0.0;
        }
        self.normal
            .iter()
            .filter(|g| g.2 == OpKind::SkipConnect)
            .count() as f64
            / self.normal.len() as f64
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

fn derive_cell(alpha: &ArchParams, reduction: bool) -> Result<Vec<GeneEdge>> {
    let w = alpha.mixing_weights(reduction);
    let mut out = Vec::new();
    for node in 2..alpha.n_nodes + 2 {
        // (weight, edge index, source, op) of each incoming edge's best non-zero op
        let mut ranked = Vec::new();
        for source in 0..node {
            let e = edge_index(node, source);
            let mut best: Option<(f64, OpKind)> = None;
            for (k, &kind) in alpha.ops.iter().enumerate() {
                if kind == OpKind::Zero {
                    continue;
                }
                if best.is_none_or(|(bw, _)| w[e][k] > bw) {
                    best = Some((w[e][k], kind));
                }
            }
            let (bw, kind) =
                best.ok_or_else(|| Error::Genotype("catalog has no non-zero operation".into()))?;
            ranked.push((bw, e, source, kind));
        }
        ranked.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        if ranked.len() < 2 {
            return Err(Error::Genotype(format!(
                "node {node} has fewer than 2 incoming edges"
            )));
        }
        let mut keep = ranked[..2].to_vec();
        keep.sort_by_key(|r| r.1);
        out.extend(keep.iter().map(|&(_, _, s, k)| GeneEdge(node, s, k)));
    }
    Ok(out)
}

/// Keeps, per node, the two incoming edges whose best non-zero operation has
/// the largest mixing weight. Ties go to the lower edge index, then the lower
/// catalog index.
pub fn derive_genotype(alpha: &ArchParams) -> Result<Genotype> {
    alpha.validate()?;
    Ok(Genotype {
        normal: derive_cell(alpha, false)?,
        reduce: derive_cell(alpha, true)?,
        meta: GenotypeMeta::default(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Head {
    Linear(Linear),
    Etf(EtfWeights),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
enum CellOps {
    /// Per edge row, one op per catalog entry.
    Mixed(Vec<Vec<Op>>),
    Discrete(Vec<(GeneEdge, Op)>),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Cell {
    reduction: bool,
    channels: usize,
    n_nodes: usize,
    pre0: Vec<Layer>,
    pre1: Vec<Layer>,
    ops: CellOps,
}

impl Cell {
    fn forward(&self, cx: &mut Ctx<'_>, s0: Var, s1: Var, weights: Option<Var>) -> Result<Var> {
        let s0 = forward_seq(&self.pre0, cx, s0)?;
        let s1 = forward_seq(&self.pre1, cx, s1)?;
        let mut states = vec![s0, s1];
        for node in 2..self.n_nodes + 2 {
            let mut parts = Vec::new();
            match &self.ops {
                CellOps::Mixed(rows) => {
                    let w = weights.ok_or_else(|| {
                        Error::InvalidArgument("search cell needs mixing weights".into())
                    })?;
                    for source in 0..node {
                        let e = edge_index(node, source);
                        let mut terms = Vec::with_capacity(rows[e].len());
                        for (k, op) in rows[e].iter().enumerate() {
                            if !op.is_zero() {
                                terms.push((k, op.forward(cx, states[source])?));
                            }
                        }
                        if !terms.is_empty() {
                            parts.push(cx.tape.weighted_sum(w, e, &terms)?);
                        }
                    }
                }
                CellOps::Discrete(genes) => {
                    for (g, op) in genes.iter().filter(|(g, _)| g.0 == node) {
                        parts.push(op.forward(cx, states[g.1])?);
                    }
                }
            }
            let value = match parts.split_first() {
                Some((&first, rest)) => {
                    rest.iter().try_fold(first, |acc, &p| cx.tape.add(acc, p))?
                }
                None => {
                    let mut shape = cx.tape.shape(states[1]);
                    if self.reduction {
                        shape[2] = shape[2].div_ceil(2);
                        shape[3] = shape[3].div_ceil(2);
                    }
                    cx.tape.constant(Tensor::zeros(shape))
                }
            };
            states.push(value);
        }
        cx.tape.concat(&states[2..])
    }
}

/// Which parameters receive gradients in a forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Trainable {
    All,
    None,
    HeadOnly,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ForwardOptions {
    pub mode: Mode,
    /// Train-mode passes update running statistics only when set.
    pub update_stats: bool,
    pub trainable: Trainable,
}

impl ForwardOptions {
    pub fn train() -> Self {
        Self {
            mode: Mode::Train,
            update_stats: true,
            trainable: Trainable::All,
        }
    }

    pub fn eval() -> Self {
        Self {
            mode: Mode::Eval,
            update_stats: false,
            trainable: Trainable::None,
        }
    }

    /// Train-mode batch statistics, weights as constants, running stats untouched.
    pub fn probe() -> Self {
        Self {
            mode: Mode::Train,
            update_stats: false,
            trainable: Trainable::None,
        }
    }
}

pub struct ForwardOutput {
    pub logits: Var,
    pub features: Var,
    /// Bound parameter handles, indexed like the network's [`ParamStore`].
    pub vars: Vec<Var>,
}

/// The stacked cell network, either searchable (mixed edges) or discrete.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Network {
    pub arch: ArchConfig,
    pub in_channels: usize,
    pub classes: usize,
    pub classifier: ClassifierKind,
    pub catalog: Vec<OpKind>,
    pub feature_dim: usize,
    pub genotype: Option<Genotype>,
    pub params: ParamStore,
    reductions: Vec<usize>,
    stem: Vec<Layer>,
    cells: Vec<Cell>,
    head: Head,
    head_ids: Vec<ParamId>,
}

fn relu_conv_bn<R: rand::Rng>(
    store: &mut ParamStore,
    name: &str,
    c_in: usize,
    c_out: usize,
    stride: usize,
    rng: &mut R,
) -> Result<Vec<Layer>> {
    Ok(vec![
        Layer::Act(ActKind::Relu),
        Layer::conv(
            store,
            &format!("{name}.conv"),
            c_in,
            c_out,
            1,
            ConvAttrs {
                stride,
                ..ConvAttrs::default()
            },
            rng,
        )?,
        Layer::norm(store, &format!("{name}.bn"), NormKind::Batch, c_out),
    ])
}

impl Network {
    /// Search network over the catalog in `arch.ops`.
    pub fn supernet(
        arch: &ArchConfig,
        in_channels: usize,
        classes: usize,
        classifier: ClassifierKind,
        seed: u64,
    ) -> Result<Self> {
        Self::build(arch, in_channels, classes, classifier, seed, None)
    }

    /// Network with only the operations retained by `genotype`.
    pub fn discrete(
        genotype: &Genotype,
        arch: &ArchConfig,
        in_channels: usize,
        classes: usize,
        classifier: ClassifierKind,
        seed: u64,
    ) -> Result<Self> {
        if genotype.normal.len() != 2 * arch.n_nodes || genotype.reduce.len() != 2 * arch.n_nodes {
            return Err(Error::Genotype(format!(
                "genotype has {} normal / {} reduce edges, config needs {} each",
                genotype.normal.len(),
                genotype.reduce.len(),
                2 * arch.n_nodes
            )));
        }
        genotype.validate(arch.n_nodes)?;
        Self::build(arch, in_channels, classes, classifier, seed, Some(genotype))
    }

    fn build(
        arch: &ArchConfig,
        in_channels: usize,
        classes: usize,
        classifier: ClassifierKind,
        seed: u64,
        genotype: Option<&Genotype>,
    ) -> Result<Self> {
        arch.validate()?;
        if in_channels == 0 || classes < 2 {
            return Err(Error::Config(format!(
                "need >= 1 input channel and >= 2 classes, got {in_channels}, {classes}"
            )));
        }
        let catalog = arch.catalog()?;
        let options = arch.op_options();
        let reductions = arch.reduction_cells()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();

        let mut c = arch.init_channels;
        let c_stem = arch.stem_multiplier * c;
        let stem = vec![
            Layer::conv(
                &mut store,
                "stem.conv",
                in_channels,
                c_stem,
                3,
                ConvAttrs::same(3, 1, 1, 1),
                &mut rng,
            )?,
            Layer::norm(&mut store, "stem.bn", NormKind::Batch, c_stem),
        ];
        let (mut c_pp, mut c_p) = (c_stem, c_stem);
        let mut reduction_prev = false;
        let mut cells = Vec::with_capacity(arch.n_cells);
        for i in 0..arch.n_cells {
            let reduction = reductions.contains(&i);
            if reduction {
                c *= 2;
            }
            let prefix = format!("cells.{i}");
            let pre0 = relu_conv_bn(
                &mut store,
                &format!("{prefix}.pre0"),
                c_pp,
                c,
                if reduction_prev { 2 } else { 1 },
                &mut rng,
            )?;
            let pre1 = relu_conv_bn(&mut store, &format!("{prefix}.pre1"), c_p, c, 1, &mut rng)?;
            let stride = |source: usize| if reduction && source < 2 { 2 } else { 1 };
            let ops = match genotype {
                None => {
                    let mut rows = Vec::new();
                    for (e, (_, source)) in edges(arch.n_nodes).into_iter().enumerate() {
                        let mut row = Vec::with_capacity(catalog.len());
                        for &kind in catalog.kinds() {
                            let name = format!("{prefix}.edge{e}.{kind}");
                            row.push(Op::build(
                                &mut store,
                                &name,
                                kind,
                                c,
                                c,
                                stride(source),
                                &options,
                                &mut rng,
                            )?);
                        }
                        rows.push(row);
                    }
                    CellOps::Mixed(rows)
                }
                Some(g) => {
                    let mut genes = g.cell(reduction).to_vec();
                    genes.sort_by_key(|g| edge_index(g.0, g.1));
                    let mut built = Vec::with_capacity(genes.len());
                    for gene in genes {
                        let e = edge_index(gene.0, gene.1);
                        let name = format!("{prefix}.edge{e}.{}", gene.2);
                        built.push((
                            gene,
                            Op::build(
                                &mut store,
                                &name,
                                gene.2,
                                c,
                                c,
                                stride(gene.1),
                                &options,
                                &mut rng,
                            )?,
                        ));
                    }
                    CellOps::Discrete(built)
                }
            };
            cells.push(Cell {
                reduction,
                channels: c,
                n_nodes: arch.n_nodes,
                pre0,
                pre1,
                ops,
            });
            c_pp = c_p;
            c_p = arch.n_nodes * c;
            reduction_prev = reduction;
        }

        let before_head = store.len();
        let head = match classifier {
            ClassifierKind::Trainable => {
                Head::Linear(Linear::new(&mut store, "head", c_p, classes, &mut rng))
            }
            ClassifierKind::Etf => Head::Etf(build_etf(c_p, classes, arch.etf_energy, seed)?),
        };
        let head_ids = (before_head..store.len()).map(ParamId).collect();
        Ok(Self {
            arch: arch.clone(),
            in_channels,
            classes,
            classifier,
            catalog: catalog.kinds().to_vec(),
            feature_dim: c_p,
            genotype: genotype.cloned(),
            params: store,
            reductions,
            stem,
            cells,
            head,
            head_ids,
        })
    }

    /// Discrete network for `genotype` whose parameters are copied, by name,
    /// from this search network.
    pub fn derive_from(&self, genotype: &Genotype, seed: u64) -> Result<Network> {
        if self.is_discrete() {
            return Err(Error::InvalidArgument(
                "derive_from needs a search network".into(),
            ));
        }
        let mut net = Network::discrete(
            genotype,
            &self.arch,
            self.in_channels,
            self.classes,
            self.classifier,
            seed,
        )?;
        if let (Head::Etf(dst), Head::Etf(src)) = (&mut net.head, &self.head) {
            *dst = src.clone();
        }
        let by_name: BTreeMap<&str, usize> = self
            .params
            .params()
            .iter()
            .enumerate()
            .map(|(i, p)| (p.name.as_str(), i))
            .collect();
        for p in net.params.params_mut() {
            let &i = by_name.get(p.name.as_str()).ok_or_else(|| {
                Error::Genotype(format!("parameter {} missing from search network", p.name))
            })?;
            p.value = self.params.params()[i].value.clone();
        }
        Ok(net)
    }

    pub fn is_discrete(&self) -> bool {
        self.genotype.is_some()
    }

    pub fn head(&self) -> &Head {
        &self.head
    }

    pub fn head_param_ids(&self) -> &[ParamId] {
        &self.head_ids
    }

    pub fn reduction_cells(&self) -> &[usize] {
        &self.reductions
    }

    /// Classifier weight matrix `(d, C)`.
    pub fn classifier_weights(&self) -> Tensor {
        match &self.head {
            Head::Linear(l) => self.params.get(l.weight).clone(),
            Head::Etf(e) => e.w.clone(),
        }
    }

    /// Trainable scalar count; a fixed classifier contributes nothing.
    pub fn parameter_count(&self) -> usize {
        self.params.scalar_count()
    }

    /// Hash of all parameters outside the classifier head.
    pub fn backbone_hash(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        for (i, p) in self.params.params().iter().enumerate() {
            if !self.head_ids.contains(&ParamId(i)) {
                h.update(p.name.as_bytes());
                crate::tensor::hash_into(&mut h, &p.value);
            }
        }
        crate::tensor::hex(&h.finalize())
    }

    pub fn check_input(&self, shape: &[usize]) -> Result<()> {
        if shape.len() != 4 || shape[1] != self.in_channels {
            return Err(Error::InvalidShape {
                op: "network",
                shape: shape.to_vec(),
                reason: format!("expected (N, {}, H, W)", self.in_channels),
            });
        }
        let f = 1usize << self.reductions.len();
        if shape[2] % f != 0 || shape[3] % f != 0 {
            return Err(Error::InvalidShape {
                op: "network",
                shape: shape.to_vec(),
                reason: format!(
                    "H and W must be divisible by {f} ({} reductions)",
                    self.reductions.len()
                ),
            });
        }
        Ok(())
    }

    /// Forward pass. Search networks require `arch` mixing weights.
    pub fn forward(
        &mut self,
        tape: &Tape,
        x: Var,
        arch: Option<&ArchVars>,
        opts: ForwardOptions,
    ) -> Result<ForwardOutput> {
        self.check_input(&tape.shape(x))?;
        if !self.is_discrete() && arch.is_none() {
            return Err(Error::InvalidArgument(
                "search network needs architecture weights".into(),
            ));
        }
        let head_ids = &self.head_ids;
        let vars = match opts.trainable {
            Trainable::All => self.params.bind(tape, true),
            Trainable::None => self.params.bind(tape, false),
            Trainable::HeadOnly => self.params.bind_with(tape, |id| head_ids.contains(&id)),
        };
        let Self {
            params,
            stem,
            cells,
            head,
            ..
        } = self;
        let mut cx = Ctx::new(tape, &vars, params, opts.mode);
        if !opts.update_stats {
            cx = cx.frozen_stats();
        }
        let s = forward_seq(stem, &mut cx, x)?;
        let (mut s0, mut s1) = (s, s);
        for cell in cells.iter() {
            let w = arch.map(|a| {
                if cell.reduction {
                    a.w_reduce
                } else {
                    a.w_normal
                }
            });
            let out = cell.forward(&mut cx, s0, s1, w)?;
            s0 = s1;
            s1 = out;
        }
        let features = tape.global_avg_pool(s1)?;
        let logits = match head {
            Head::Linear(l) => l.forward(&cx, features)?,
            Head::Etf(e) => e.logits_on(tape, features)?,
        };
        Ok(ForwardOutput {
            logits,
            features,
            vars,
        })
    }

    /// Eval-mode logits and features for `images`, processed in chunks.
    pub fn predict(
        &mut self,
        images: &Tensor,
        arch: Option<&ArchParams>,
        batch_size: usize,
    ) -> Result<(Tensor, Tensor)> {
        let n = images.shape()[0];
        let mut logits = Vec::with_capacity(n * self.classes);
        let mut feats = Vec::with_capacity(n * self.feature_dim);
        for chunk in crate::data::ordered_batches(n, batch_size) {
            let tape = Tape::new();
            let x = tape.constant(images.gather_rows(&chunk));
            let a = arch.map(|a| a.bind(&tape, false)).transpose()?;
            let out = self.forward(&tape, x, a.as_ref(), ForwardOptions::eval())?;
            logits.extend_from_slice(tape.value(out.logits).data());
            feats.extend_from_slice(tape.value(out.features).data());
        }
        Ok((
            Tensor::new(vec![n, self.classes], logits)?,
            Tensor::new(vec![n, self.feature_dim], feats)?,
        ))
    }
}

/// Sum of softmax weights on a tape value, per row; used to audit normalization.
pub fn max_row_sum_deviation(weights: &Tensor) -> f64 {
    let k = weights.shape()[1];
    weights
        .data()
        .chunks(k)
        .map(|r| (r.iter().sum::<f64>() - 1.0).abs())
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn edge_indexing() {
        assert_eq!(edge_count(4), 14);
        let all = edges(4);
        assert_eq!(all.len(), 14);
        for (i, &(node, source)) in all.iter().enumerate() {
            assert_eq!(edge_index(node, source), i);
        }
    }

    #[test]
    fn default_reductions() {
        let a = ArchConfig::default();
        assert_eq!(a.reduction_cells().unwrap(), vec![1, 3]);
        assert_eq!(a.feature_dim().unwrap(), 128);
        let bad = ArchConfig {
            reductions: Some(vec![7]),
            ..ArchConfig::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn classifier_kind_parsing() {
        assert_eq!(
            "etf".parse::<ClassifierKind>().unwrap(),
            ClassifierKind::Etf
        );
        assert!("linear".parse::<ClassifierKind>().is_err());
    }
}
