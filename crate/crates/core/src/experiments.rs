//! Experiment suites: component exploration on a fixed backbone, operation
//! comparison, catalog/classifier ablation and the trainable-vs-ETF collapse study.
//!
//! Accuracy metrics in suite rows are percentages.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{ConvAttrs, Tape, Var};
use crate::config::ExperimentConfig;
use crate::data::{bilevel_split, synthesize, LabeledDataset};
use crate::error::{Error, Result};
use crate::nn::{forward_seq, ActKind, Ctx, Layer, Linear, Mode, NormKind, ParamStore};
use crate::ops::blocks::{ActPlacement, Block, BlockSpec, ConvDesign, ShortcutRule, Topology};
use crate::ops::{Catalog, Op, OpKind, OpOptions};
use crate::search::{search, SearchData, SearchIo, SearchOutcome};
use crate::supernet::{ArchConfig, ClassifierKind};
use crate::tensor::Tensor;
use crate::train::{
    curve_to_csv, evaluate, fit, train_from_scratch, EvalReport, GroupThresholds, Model,
    TrainOutcome, Trainee,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuiteRow {
    pub label: String,
    pub seed: u64,
    pub config_hash: String,
    pub metrics: BTreeMap<String, f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SuiteResult {
    pub suite: String,
    pub rows: Vec<SuiteRow>,
}

/// `mean±std` with two decimals; the sample standard deviation, 0 for one value.
pub fn format_mean_std(values: &[f64]) -> String {
    let (m, s) = mean_std(values);
    format!("{m:.2}±{s:.2}")
}

pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let m = values.iter().sum::<f64>() / n;
    if values.len() == 1 {
        return (m, 0.0);
    }
    let v = values.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
    (m, v.sqrt())
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    match v.len() {
        0 => f64::NAN,
        n if n % 2 == 1 => v[n / 2],
        n => 0.5 * (v[n / 2 - 1] + v[n / 2]),
    }
}

impl SuiteResult {
    pub fn new(suite: &str) -> Self {
        Self {
            suite: suite.to_string(),
            rows: Vec::new(),
        }
    }

    /// Row labels in first-appearance order.
    pub fn labels(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for r in &self.rows {
            if !out.contains(&r.label) {
                out.push(r.label.clone());
            }
        }
        out
    }

    pub fn values(&self, label: &str, metric: &str) -> Vec<f64> {
        self.rows
            .iter()
            .filter(|r| r.label == label)
            .filter_map(|r| r.metrics.get(metric).copied())
            .collect()
    }

    pub fn mean(&self, label: &str, metric: &str) -> f64 {
        mean_std(&self.values(label, metric)).0
    }

    fn metric_names(&self) -> Vec<String> {
        let mut names: Vec<String> = self
            .rows
            .iter()
            .flat_map(|r| r.metrics.keys().cloned())
            .collect();
        names.sort();
        names.dedup();
        names
    }

    /// One line per row: `label,seed,config_hash,<metrics...>`.
    pub fn to_csv(&self) -> Result<String> {
        let names = self.metric_names();
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["label".to_string(), "seed".into(), "config_hash".into()];
        header.extend(names.iter().cloned());
        w.write_record(&header)?;
        for r in &self.rows {
            let mut rec = vec![r.label.clone(), r.seed.to_string(), r.config_hash.clone()];
            rec.extend(
                names
                    .iter()
                    .map(|n| r.metrics.get(n).map(|v| v.to_string()).unwrap_or_default()),
            );
            w.write_record(&rec)?;
        }
        finish_csv(w)
    }

    /// Per-label `mean±std` over seeds, plus the seeds and config hashes behind each cell.
    pub fn aggregate_csv(&self) -> Result<String> {
        let names = self.metric_names();
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["label".to_string(), "seeds".into(), "config_hash".into()];
        header.extend(names.iter().cloned());
        w.write_record(&header)?;
        for label in self.labels() {
            let rows: Vec<&SuiteRow> = self.rows.iter().filter(|r| r.label == label).collect();
            let seeds: Vec<String> = rows.iter().map(|r| r.seed.to_string()).collect();
            let mut hashes: Vec<&str> = rows.iter().map(|r| r.config_hash.as_str()).collect();
            hashes.dedup();
            let mut rec = vec![label.clone(), seeds.join(" "), hashes.join(" ")];
            rec.extend(
                names
                    .iter()
                    .map(|n| format_mean_std(&self.values(&label, n))),
            );
            w.write_record(&rec)?;
        }
        finish_csv(w)
    }

    /// Architecture scatter: parameter count against accuracy, one point per row.
    pub fn scatter_csv(&self, acc_metric: &str) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["label", "seed", "config_hash", "params", "accuracy"])?;
        for r in &self.rows {
            if let (Some(p), Some(a)) = (r.metrics.get("params"), r.metrics.get(acc_metric)) {
                w.write_record([
                    r.label.clone(),
                    r.seed.to_string(),
                    r.config_hash.clone(),
                    p.to_string(),
                    a.to_string(),
                ])?;
            }
        }
        finish_csv(w)
    }
}

fn finish_csv(w: csv::Writer<Vec<u8>>) -> Result<String> {
    let bytes = w.into_inner().map_err(|e| Error::Format(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| Error::Format(e.to_string()))
}

enum Unit {
    Op(Op),
    Block(Block),
}

/// Fixed three-stage residual stack: stem, `c -> c`, `c -> 2c` (stride 2),
/// `2c -> 2c`, global pooling and a linear classifier.
pub struct Backbone {
    pub params: ParamStore,
    stem: Vec<Layer>,
    units: Vec<Unit>,
    head: Linear,
    unit_params: usize,
}

fn stem(
    store: &mut ParamStore,
    in_ch: usize,
    c: usize,
    norm: NormKind,
    act: ActKind,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Layer>> {
    Ok(vec![
        Layer::conv(
            store,
            "stem.conv",
            in_ch,
            c,
            3,
            ConvAttrs::same(3, 1, 1, 1),
            rng,
        )?,
        Layer::norm(store, "stem.norm", norm, c),
        Layer::Act(act),
    ])
}

const STAGES: [(usize, usize, usize); 3] = [(1, 1, 1), (1, 2, 2), (2, 2, 1)];

impl Backbone {
    pub fn with_blocks(
        spec: BlockSpec,
        in_ch: usize,
        channels: usize,
        classes: usize,
        seed: u64,
    ) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let stem = stem(&mut params, in_ch, channels, spec.norm, spec.act, &mut rng)?;
        let before = params.scalar_count();
        let mut units = Vec::new();
        for (i, (a, b, s)) in STAGES.into_iter().enumerate() {
            let blk = Block::build(
                &mut params,
                &format!("units.{i}"),
                spec,
                a * channels,
                b * channels,
                s,
                &mut rng,
            )?;
            units.push(Unit::Block(blk));
        }
        let unit_params = params.scalar_count() - before;
        let head = Linear::new(&mut params, "head", 2 * channels, classes, &mut rng);
        Ok(Self {
            params,
            stem,
            units,
            head,
            unit_params,
        })
    }

    pub fn with_op(
        kind: OpKind,
        options: &OpOptions,
        in_ch: usize,
        channels: usize,
        classes: usize,
        seed: u64,
    ) -> Result<Self> {
        if matches!(kind, OpKind::Zero) {
            return Err(Error::InvalidArgument(
                "the zero operation cannot form a backbone".into(),
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let stem = stem(
            &mut params,
            in_ch,
            channels,
            NormKind::Batch,
            ActKind::Relu,
            &mut rng,
        )?;
        let before = params.scalar_count();
        let mut units = Vec::new();
        for (i, (a, b, s)) in STAGES.into_iter().enumerate() {
            let op = Op::build(
                &mut params,
                &format!("units.{i}"),
                kind,
                a * channels,
                b * channels,
                s,
                options,
                &mut rng,
            )?;
            units.push(Unit::Op(op));
        }
        let unit_params = params.scalar_count() - before;
        let head = Linear::new(&mut params, "head", 2 * channels, classes, &mut rng);
        Ok(Self {
            params,
            stem,
            units,
            head,
            unit_params,
        })
    }

    /// Trainable scalars in the three stages, excluding stem and classifier.
    pub fn unit_parameter_count(&self) -> usize {
        self.unit_params
    }

    fn run(&mut self, tape: &Tape, x: Var, mode: Mode) -> Result<(Var, Vec<Var>)> {
        let vars = self.params.bind(tape, mode == Mode::Train);
        let Self {
            params,
            stem,
            units,
            head,
            ..
        } = self;
        let mut cx = Ctx::new(tape, &vars, params, mode);
        let mut h = forward_seq(stem, &mut cx, x)?;
        for u in units.iter() {
            h = match u {
                Unit::Op(op) => op.forward(&mut cx, h)?,
                Unit::Block(b) => b.forward(&mut cx, h)?,
            };
        }
        let f = tape.global_avg_pool(h)?;
        let logits = head.forward(&cx, f)?;
        Ok((logits, vars))
    }
}

impl Model for Backbone {
    fn logits(&mut self, images: &Tensor) -> Result<Tensor> {
        let n = images.shape()[0];
        let mut out = Vec::new();
        for chunk in crate::data::ordered_batches(n, 64) {
            let tape = Tape::new();
            let x = tape.constant(images.gather_rows(&chunk));
            let (l, _) = self.run(&tape, x, Mode::Eval)?;
            out.extend_from_slice(tape.value(l).data());
        }
        Tensor::new(vec![n, self.head.classes], out)
    }

    fn parameter_count(&self) -> usize {
        self.params.scalar_count()
    }
}

impl Trainee for Backbone {
    fn forward_train(&mut self, tape: &Tape, x: Var) -> Result<(Var, Vec<Var>)> {
        self.run(tape, x, Mode::Train)
    }

    fn param_values(&mut self) -> Vec<&mut Tensor> {
        self.params
            .params_mut()
            .iter_mut()
            .map(|p| &mut p.value)
            .collect()
    }
}

/// Scalars of one `channels -> channels` stride-1 instance of `kind`.
pub fn op_param_count(kind: OpKind, channels: usize, options: &OpOptions) -> Result<usize> {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    Op::build(
        &mut store, "op", kind, channels, channels, 1, options, &mut rng,
    )?;
    Ok(store.scalar_count())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExploreAxis {
    Topology,
    Convolution,
    ActivationPlacement,
    ActivationKind,
    Normalization,
}

impl ExploreAxis {
    pub const ALL: [ExploreAxis; 5] = [
        ExploreAxis::Topology,
        ExploreAxis::Convolution,
        ExploreAxis::ActivationPlacement,
        ExploreAxis::ActivationKind,
        ExploreAxis::Normalization,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ExploreAxis::Topology => "topology",
            ExploreAxis::Convolution => "convolution",
            ExploreAxis::ActivationPlacement => "activation_placement",
            ExploreAxis::ActivationKind => "activation_kind",
            ExploreAxis::Normalization => "normalization",
        }
    }

    /// Labeled block specs differing from the reference only along this axis.
    /// The reference is a post-activated ReLU/BatchNorm bottleneck with a plain 3x3.
    pub fn variants(self) -> Vec<(&'static str, BlockSpec)> {
        let base = BlockSpec {
            shortcut: ShortcutRule::Projection,
            ..BlockSpec::bottleneck(ConvDesign::Plain, ActPlacement::Post)
        };
        let with = |f: &dyn Fn(&mut BlockSpec)| {
            let mut s = base;
            f(&mut s);
            s
        };
        match self {
            ExploreAxis::Topology => vec![
                ("basic", with(&|s| s.topology = Topology::Basic)),
                ("bottleneck", base),
            ],
            ExploreAxis::Convolution => vec![
                ("plain", base),
                (
                    "aggregated",
                    with(&|s| s.conv = ConvDesign::Aggregated { max_paths: 32 }),
                ),
                (
                    "hierarchical",
                    with(&|s| s.conv = ConvDesign::Hierarchical { max_scale: 8 }),
                ),
                (
                    "se",
                    with(&|s| s.conv = ConvDesign::SqueezeExcite { reduction: 4 }),
                ),
                ("separable", with(&|s| s.conv = ConvDesign::Separable)),
                ("dilated", with(&|s| s.conv = ConvDesign::Dilated)),
            ],
            ExploreAxis::ActivationPlacement => vec![
                ("pre", with(&|s| s.placement = ActPlacement::Pre)),
                ("post", base),
            ],
            ExploreAxis::ActivationKind => vec![
                ("relu", base),
                ("sigmoid", with(&|s| s.act = ActKind::Sigmoid)),
                ("gelu", with(&|s| s.act = ActKind::Gelu)),
            ],
            ExploreAxis::Normalization => vec![
                ("batch", base),
                ("layer", with(&|s| s.norm = NormKind::Layer)),
                ("group", with(&|s| s.norm = NormKind::Group)),
            ],
        }
    }
}

impl fmt::Display for ExploreAxis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ExploreAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ExploreAxis::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| {
                let names: Vec<_> = ExploreAxis::ALL.iter().map(|a| a.name()).collect();
                Error::Config(format!(
                    "unknown axis {s:?}; expected one of {}",
                    names.join(", ")
                ))
            })
    }
}

fn backbone_train_config(cfg: &ExperimentConfig, seed: u64) -> crate::train::TrainConfig {
    crate::train::TrainConfig {
        epochs: cfg.suite.backbone_epochs,
        classifier: ClassifierKind::Trainable,
        seed,
        ..cfg.train.clone()
    }
}

fn acc_metrics(report: &EvalReport) -> BTreeMap<String, f64> {
    let mut m = BTreeMap::new();
    m.insert("acc".into(), 100.0 * report.overall_accuracy);
    for (name, g) in [
        ("many", &report.many),
        ("medium", &report.medium),
        ("few", &report.few),
    ] {
        if let Some(a) = g.accuracy {
            m.insert(format!("{name}_acc"), 100.0 * a);
        }
    }
    m.insert("params".into(), report.parameter_count as f64);
    m
}

fn train_backbone(
    net: &mut Backbone,
    cfg: &ExperimentConfig,
    seed: u64,
    train: &LabeledDataset,
    test: &LabeledDataset,
) -> Result<EvalReport> {
    fit(net, &backbone_train_config(cfg, seed), train, test)?;
    evaluate(
        net,
        test,
        &train.per_class_counts(),
        GroupThresholds::default(),
        &cfg.hash(),
        seed,
    )
}

/// Imbalance ratios swept by `explore`: the configured list plus the balanced control.
pub fn explore_rhos(cfg: &ExperimentConfig) -> Vec<f64> {
    let mut r = cfg.suite.rhos.clone();
    r.push(1.0);
    r.sort_by(f64::total_cmp);
    r.dedup();
    r
}

/// Trains the fixed backbone once per (rho, variant, seed). Labels are `<variant>@rho<rho>`.
pub fn explore(cfg: &ExperimentConfig, axis: ExploreAxis) -> Result<SuiteResult> {
    cfg.validate()?;
    let mut out = SuiteResult::new(&format!("explore:{axis}"));
    let hash = cfg.hash();
    for rho in explore_rhos(cfg) {
        let spec = crate::data::LongTailSpec {
            rho,
            ..cfg.data.clone()
        };
        let (train, test) = synthesize(&spec)?;
        let [ch, _, _] = train.image_shape();
        for (name, block) in axis.variants() {
            for &seed in &cfg.suite.seeds {
                let mut net = Backbone::with_blocks(
                    block,
                    ch,
                    cfg.suite.backbone_channels,
                    train.classes,
                    seed,
                )?;
                let report = train_backbone(&mut net, cfg, seed, &train, &test)?;
                let mut metrics = acc_metrics(&report);
                metrics.insert("rho".into(), rho);
                log::info!(
                    "explore {axis} {name} rho {rho} seed {seed}: {:.2}",
                    metrics["acc"]
                );
                out.rows.push(SuiteRow {
                    label: format!("{name}@rho{rho}"),
                    seed,
                    config_hash: hash.clone(),
                    metrics,
                });
            }
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamGuard {
    pub reference: String,
    pub reference_params: usize,
    pub channels: usize,
    /// `(op, params, ratio to reference)` for the long-tail operations.
    pub ops: Vec<(String, usize, f64)>,
    pub limit: f64,
    pub pass: bool,
}

/// The long-tail operations' size relative to `sep_conv_5x5` at the backbone width.
pub fn param_guard(cfg: &ExperimentConfig) -> Result<ParamGuard> {
    let c = cfg.suite.backbone_channels;
    let opts = cfg.arch.op_options();
    let reference = op_param_count(OpKind::SepConv5x5, c, &opts)?;
    let mut ops = Vec::new();
    for kind in [OpKind::LtAggConv, OpKind::LtHierConv] {
        let p = op_param_count(kind, c, &opts)?;
        ops.push((kind.tag().to_string(), p, p as f64 / reference as f64));
    }
    let limit = 1.5;
    let pass = ops.iter().all(|(_, _, r)| *r <= limit);
    Ok(ParamGuard {
        reference: OpKind::SepConv5x5.tag().into(),
        reference_params: reference,
        channels: c,
        ops,
        limit,
        pass,
    })
}

/// Fixed-backbone comparison, one row per configured operation in catalog order.
pub fn opcompare(cfg: &ExperimentConfig) -> Result<(SuiteResult, ParamGuard)> {
    cfg.validate()?;
    let catalog = Catalog::from_names(&cfg.suite.opcompare_ops)?;
    let mut kinds = catalog.kinds().to_vec();
    kinds.sort_by_key(|k| k.catalog_index());
    let (train, test) = cfg.load_data()?;
    let [ch, _, _] = train.image_shape();
    let opts = cfg.arch.op_options();
    let hash = cfg.hash();
    let mut out = SuiteResult::new("opcompare");
    for kind in kinds {
        for &seed in &cfg.suite.seeds {
            let mut net = Backbone::with_op(
                kind,
                &opts,
                ch,
                cfg.suite.backbone_channels,
                train.classes,
                seed,
            )?;
            let report = train_backbone(&mut net, cfg, seed, &train, &test)?;
            let mut metrics = acc_metrics(&report);
            metrics.insert("op_params".into(), net.unit_parameter_count() as f64);
            log::info!("opcompare {kind} seed {seed}: {:.2}", metrics["acc"]);
            out.rows.push(SuiteRow {
                label: kind.tag().into(),
                seed,
                config_hash: hash.clone(),
                metrics,
            });
        }
    }
    Ok((out, param_guard(cfg)?))
}

/// One search followed by retraining of the derived genotype.
pub struct SearchRetrain {
    pub search: SearchOutcome,
    pub train: TrainOutcome,
    pub report: EvalReport,
}

impl SearchRetrain {
    /// Eigenvalue from the last epoch that ran the Hessian probe.
    pub fn final_lambda(&self) -> Option<f64> {
        self.search
            .trace
            .records
            .iter()
            .rev()
            .find_map(|r| r.lambda_max)
    }

    pub fn search_acc(&self) -> f64 {
        self.search
            .trace
            .records
            .last()
            .map(|r| 100.0 * r.val_balanced_acc)
            .unwrap_or(f64::NAN)
    }

    pub fn metrics(&self) -> BTreeMap<String, f64> {
        let mut m = acc_metrics(&self.report);
        m.insert("retrain_acc".into(), 100.0 * self.report.overall_accuracy);
        m.insert("search_acc".into(), self.search_acc());
        m.insert("skip_fraction".into(), self.search.genotype.skip_fraction());
        if let Some(l) = self.final_lambda() {
            m.insert("lambda_max".into(), l);
        }
        m
    }
}

/// Bilevel search on `train` split by `cfg.search.split_fraction`.
pub fn run_search(
    cfg: &ExperimentConfig,
    arch: &ArchConfig,
    classifier: ClassifierKind,
    seed: u64,
    data: (&LabeledDataset, &LabeledDataset),
    trace_csv: Option<PathBuf>,
) -> Result<SearchOutcome> {
    let (train, test) = data;
    let mut scfg = cfg.search.clone();
    scfg.classifier = classifier;
    scfg.seed = seed;
    let split = bilevel_split(train, scfg.split_fraction, seed)?;
    let io = SearchIo {
        trace_csv,
        snapshot_dir: None,
        config_hash: cfg.hash(),
    };
    let sdata = SearchData {
        w_set: &split.w_set,
        alpha_set: &split.alpha_set,
        test,
        class_counts: train.per_class_counts(),
    };
    search(&scfg, arch, sdata, &io)
}

/// Searches with `arch` and `classifier`, derives the genotype and trains it
/// from scratch under `cfg.train`.
pub fn search_and_retrain(
    cfg: &ExperimentConfig,
    arch: &ArchConfig,
    classifier: ClassifierKind,
    seed: u64,
    data: (&LabeledDataset, &LabeledDataset),
    trace_csv: Option<PathBuf>,
) -> Result<SearchRetrain> {
    let outcome = run_search(cfg, arch, classifier, seed, data, trace_csv)?;
    let (train, test) = data;
    let tcfg = crate::train::TrainConfig {
        seed,
        ..cfg.train.clone()
    };
    let mut trained = train_from_scratch(&outcome.genotype, arch, &tcfg, train, test)?;
    let report = evaluate(
        &mut trained.network,
        test,
        &train.per_class_counts(),
        GroupThresholds::default(),
        &cfg.hash(),
        seed,
    )?;
    Ok(SearchRetrain {
        search: outcome,
        train: trained,
        report,
    })
}

pub const ABLATE_LABELS: [&str; 3] = ["vanilla", "+conv", "+conv+etf"];

/// Search and retrain with the original catalog, the catalog containing the
/// long-tail operations, and the latter with the fixed classifier.
pub fn ablate(cfg: &ExperimentConfig) -> Result<SuiteResult> {
    cfg.validate()?;
    let (train, test) = cfg.load_data()?;
    let vanilla = ArchConfig {
        ops: Catalog::vanilla().names(),
        ..cfg.arch.clone()
    };
    let conv = ArchConfig {
        ops: Catalog::from_names(&cfg.suite.ablate_conv_ops)?.names(),
        ..cfg.arch.clone()
    };
    let arms = [
        (ABLATE_LABELS[0], &vanilla, ClassifierKind::Trainable),
        (ABLATE_LABELS[1], &conv, ClassifierKind::Trainable),
        (ABLATE_LABELS[2], &conv, ClassifierKind::Etf),
    ];
    let hash = cfg.hash();
    let mut out = SuiteResult::new("ablate");
    for &seed in &cfg.suite.seeds {
        for (label, arch, classifier) in arms {
            let run = search_and_retrain(cfg, arch, classifier, seed, (&train, &test), None)?;
            log::info!(
                "ablate {label} seed {seed}: {:.2}",
                run.report.overall_accuracy * 100.0
            );
            out.rows.push(SuiteRow {
                label: label.into(),
                seed,
                config_hash: hash.clone(),
                metrics: run.metrics(),
            });
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CollapseSeed {
    pub seed: u64,
    pub lambda_trainable: Option<f64>,
    pub lambda_etf: Option<f64>,
    pub search_acc_trainable: f64,
    pub search_acc_etf: f64,
    pub retrain_acc_trainable: f64,
    pub retrain_acc_etf: f64,
    pub skip_fraction_trainable: f64,
    pub skip_fraction_etf: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CollapseSummary {
    pub config_hash: String,
    pub seeds: Vec<CollapseSeed>,
    pub median_lambda_trainable: f64,
    pub median_lambda_etf: f64,
    /// Median final-probe eigenvalue under the fixed classifier is no larger.
    pub lambda_pass: bool,
    /// Seeds where the fixed-classifier genotype retrains at least as well.
    pub etf_retrain_wins: usize,
    pub mean_skip_fraction_trainable: f64,
    pub mean_skip_fraction_etf: f64,
}

impl CollapseSummary {
    pub fn from_seeds(config_hash: String, seeds: Vec<CollapseSeed>) -> Self {
        let lt: Vec<f64> = seeds.iter().filter_map(|s| s.lambda_trainable).collect();
        let le: Vec<f64> = seeds.iter().filter_map(|s| s.lambda_etf).collect();
        let (mt, me) = (median(&lt), median(&le));
        let wins = seeds
            .iter()
            .filter(|s| s.retrain_acc_etf >= s.retrain_acc_trainable)
            .count();
        let skip_t = mean_std(
            &seeds
                .iter()
                .map(|s| s.skip_fraction_trainable)
                .collect::<Vec<_>>(),
        )
        .0;
        let skip_e = mean_std(
            &seeds
                .iter()
                .map(|s| s.skip_fraction_etf)
                .collect::<Vec<_>>(),
        )
        .0;
        Self {
            config_hash,
            median_lambda_trainable: mt,
            median_lambda_etf: me,
            lambda_pass: me <= mt,
            etf_retrain_wins: wins,
            mean_skip_fraction_trainable: skip_t,
            mean_skip_fraction_etf: skip_e,
            seeds,
        }
    }
}

/// Matched-seed searches with the trainable and the fixed classifier. With
/// `out_dir`, writes `seed<S>_<arm>_trace.csv` and `seed<S>_<arm>_curve.csv`.
pub fn collapse(
    cfg: &ExperimentConfig,
    out_dir: Option<&Path>,
) -> Result<(SuiteResult, CollapseSummary)> {
    cfg.validate()?;
    let (train, test) = cfg.load_data()?;
    let hash = cfg.hash();
    let mut out = SuiteResult::new("collapse");
    let mut seeds = Vec::new();
    for &seed in &cfg.suite.seeds {
        let mut arms = Vec::new();
        for kind in [ClassifierKind::Trainable, ClassifierKind::Etf] {
            let trace = out_dir.map(|d| d.join(format!("seed{seed}_{kind}_trace.csv")));
            let run = search_and_retrain(cfg, &cfg.arch, kind, seed, (&train, &test), trace)?;
            if let Some(d) = out_dir {
                std::fs::write(
                    d.join(format!("seed{seed}_{kind}_curve.csv")),
                    curve_to_csv(&run.train.curve)?,
                )?;
            }
            out.rows.push(SuiteRow {
                label: kind.to_string(),
                seed,
                config_hash: hash.clone(),
                metrics: run.metrics(),
            });
            arms.push(run);
        }
        let (t, e) = (&arms[0], &arms[1]);
        seeds.push(CollapseSeed {
            seed,
            lambda_trainable: t.final_lambda(),
            lambda_etf: e.final_lambda(),
            search_acc_trainable: t.search_acc(),
            search_acc_etf: e.search_acc(),
            retrain_acc_trainable: 100.0 * t.report.overall_accuracy,
            retrain_acc_etf: 100.0 * e.report.overall_accuracy,
            skip_fraction_trainable: t.search.genotype.skip_fraction(),
            skip_fraction_etf: e.search.genotype.skip_fraction(),
        });
    }
    Ok((out, CollapseSummary::from_seeds(hash, seeds)))
}
