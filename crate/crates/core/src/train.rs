//! Training derived networks from scratch, classifier retraining and evaluation.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::data::{shuffled_batches, LabeledDataset};
use crate::error::{Error, Result};
use crate::nn::Linear;
use crate::optim::{clip_grad_norm, cosine_lr, Sgd, SgdConfig};
use crate::rebalance::{
    loss_on, mixed_loss_on, mixup_batch, ClassBalancedSampler, CrtSpec, LossConfig, LossKind,
    LossSpec, MixupSpec, Recipe,
};
use crate::search::argmax;
use crate::supernet::{ArchConfig, ClassifierKind, ForwardOptions, Genotype, Head, Network};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: SgdConfig,
    /// When set, overrides `loss.kind`, `loss.drw`, `mixup.enabled` and `crt`.
    pub recipe: Option<Recipe>,
    pub loss: LossConfig,
    pub mixup: MixupSpec,
    pub crt: Option<CrtSpec>,
    pub classifier: ClassifierKind,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 40,
            batch_size: 16,
            optimizer: SgdConfig {
                lr: 0.05,
                lr_min: 0.0,
                ..SgdConfig::default()
            },
            recipe: None,
            loss: LossConfig::default(),
            mixup: MixupSpec::default(),
            crt: None,
            classifier: ClassifierKind::Trainable,
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// Loss, Mixup and cRT settings after applying `recipe`.
    pub fn resolved(&self) -> (LossConfig, MixupSpec, Option<CrtSpec>) {
        let (mut loss, mut mixup, mut crt) = (self.loss, self.mixup, self.crt);
        if let Some(r) = self.recipe {
            loss.kind = r.loss_kind();
            loss.drw = r.uses_drw();
            mixup.enabled = r.uses_mixup();
            crt = if r.uses_crt() {
                Some(crt.unwrap_or(CrtSpec {
                    epochs: (self.epochs / 5).max(1),
                    ..CrtSpec::default()
                }))
            } else {
                None
            };
        }
        (loss, mixup, crt)
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("train.batch_size must be positive".into()));
        }
        if !(self.optimizer.lr > 0.0) {
            return Err(Error::Config("train.optimizer.lr must be positive".into()));
        }
        let (_, mixup, crt) = self.resolved();
        if mixup.enabled && !(mixup.beta_param > 0.0) {
            return Err(Error::Config(
                "train.mixup.beta_param must be positive".into(),
            ));
        }
        if crt.is_some_and(|c| c.epochs == 0) {
            return Err(Error::Config("train.crt.epochs must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub test_balanced_acc: f64,
}

pub fn curve_to_csv(curve: &[CurvePoint]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for p in curve {
        w.serialize(p)?;
    }
    if curve.is_empty() {
        w.write_record(["epoch", "lr", "train_loss", "test_balanced_acc"])?;
    }
    String::from_utf8(w.into_inner().map_err(|e| Error::Format(e.to_string()))?)
        .map_err(|e| Error::Format(e.to_string()))
}

pub struct TrainOutcome {
    pub network: Network,
    pub curve: Vec<CurvePoint>,
    pub crt: Option<CrtOutcome>,
}

/// Anything that maps a batch of images to logits.
pub trait Model {
    fn logits(&mut self, images: &Tensor) -> Result<Tensor>;
    fn parameter_count(&self) -> usize;
}

impl Model for Network {
    fn logits(&mut self, images: &Tensor) -> Result<Tensor> {
        Ok(self.predict(images, None, 64)?.0)
    }

    fn parameter_count(&self) -> usize {
        Network::parameter_count(self)
    }
}

/// Exact count of trainable scalars; a fixed classifier contributes nothing.
pub fn count_parameters(net: &Network) -> usize {
    net.parameter_count()
}

/// Trains `genotype` from a fresh initialization.
pub fn train_from_scratch(
    genotype: &Genotype,
    arch: &ArchConfig,
    cfg: &TrainConfig,
    train: &LabeledDataset,
    test: &LabeledDataset,
) -> Result<TrainOutcome> {
    let [ch, _, _] = train.image_shape();
    let net = Network::discrete(genotype, arch, ch, train.classes, cfg.classifier, cfg.seed)?;
    train_network(net, cfg, train, test)
}

/// Trains any discrete network in place of a genotype-built one.
pub fn train_network(
    mut net: Network,
    cfg: &TrainConfig,
    train: &LabeledDataset,
    test: &LabeledDataset,
) -> Result<TrainOutcome> {
    let curve = fit(&mut net, cfg, train, test)?;
    let crt = match cfg.resolved().2 {
        Some(spec) => Some(crt_retrain(
            &mut net,
            &spec,
            train,
            cfg.batch_size,
            cfg.optimizer.lr,
            cfg.seed,
        )?),
        None => None,
    };
    Ok(TrainOutcome {
        network: net,
        curve,
        crt,
    })
}

/// A model the training loop can optimize.
pub trait Trainee: Model {
    /// Train-mode forward: logits plus one bound variable per stored parameter.
    fn forward_train(&mut self, tape: &Tape, x: Var) -> Result<(Var, Vec<Var>)>;
    fn param_values(&mut self) -> Vec<&mut Tensor>;
}

impl Trainee for Network {
    fn forward_train(&mut self, tape: &Tape, x: Var) -> Result<(Var, Vec<Var>)> {
        let out = self.forward(tape, x, None, ForwardOptions::train())?;
        Ok((out.logits, out.vars))
    }

    fn param_values(&mut self) -> Vec<&mut Tensor> {
        self.params
            .params_mut()
            .iter_mut()
            .map(|p| &mut p.value)
            .collect()
    }
}

/// SGD with a cosine schedule under the configured loss and Mixup; returns the
/// per-epoch curve. cRT is not applied here.
pub fn fit<T: Trainee>(
    model: &mut T,
    cfg: &TrainConfig,
    train: &LabeledDataset,
    test: &LabeledDataset,
) -> Result<Vec<CurvePoint>> {
    cfg.validate()?;
    let (loss_cfg, mixup, _) = cfg.resolved();
    let loss = loss_cfg.spec(train.per_class_counts().iter().map(|&n| n.max(1)).collect());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(3));
    let mut opt = Sgd::new(cfg.optimizer.momentum, cfg.optimizer.weight_decay);
    let mut curve = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let lr = cosine_lr(cfg.optimizer.lr, cfg.optimizer.lr_min, epoch, cfg.epochs);
        let frac = epoch as f64 / cfg.epochs as f64;
        let batches = shuffled_batches(train.len(), cfg.batch_size, &mut rng);
        let mut total = 0.0;
        for (step, idx) in batches.iter().enumerate() {
            let (x, y) = train.batch(idx);
            let mixed = mixup_batch(&mixup, &x, &y, &mut rng)?;
            let tape = Tape::new();
            let xv = tape.constant(mixed.images.clone());
            let (logits, vars) = model
                .forward_train(&tape, xv)
                .map_err(|e| at(e, epoch, step))?;
            let l = mixed_loss_on(&tape, &loss, logits, &mixed, frac)
                .map_err(|e| at(e, epoch, step))?;
            total += tape.value(l).item();
            let mut g = tape.backward(l).map_err(|e| at(e, epoch, step))?;
            let mut grads: Vec<_> = vars.iter().map(|&v| g.take(v)).collect();
            clip_grad_norm(&mut grads, cfg.optimizer.grad_clip);
            opt.step(&mut model.param_values(), &grads, lr);
        }
        let logits = model.logits(&test.images)?;
        let point = CurvePoint {
            epoch: epoch + 1,
            lr,
            train_loss: total / batches.len() as f64,
            test_balanced_acc: crate::search::balanced_accuracy(
                &logits,
                &test.labels,
                test.classes,
            ),
        };
        log::info!(
            "train epoch {}: loss {:.4} acc {:.3}",
            point.epoch,
            point.train_loss,
            point.test_balanced_acc
        );
        curve.push(point);
    }
    Ok(curve)
}

fn at(e: Error, epoch: usize, step: usize) -> Error {
    match e {
        Error::NonFinite(reason) => Error::Diverged {
            epoch: epoch + 1,
            step,
            reason,
        },
        other => other,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CrtOutcome {
    /// Set when retraining was skipped.
    pub notice: Option<String>,
    pub backbone_hash_before: String,
    pub backbone_hash_after: String,
    pub epochs: usize,
}

/// Retrains only the linear classifier on frozen eval-mode features with
/// class-balanced sampling. A fixed classifier is left untouched.
pub fn crt_retrain(
    net: &mut Network,
    spec: &CrtSpec,
    train: &LabeledDataset,
    batch_size: usize,
    lr: f64,
    seed: u64,
) -> Result<CrtOutcome> {
    let before = net.backbone_hash();
    let head: Linear = match net.head() {
        Head::Etf(_) => {
            let notice =
                "classifier retraining skipped: the fixed ETF classifier has no trainable weights"
                    .to_string();
            log::warn!("{notice}");
            return Ok(CrtOutcome {
                notice: Some(notice),
                backbone_hash_after: before.clone(),
                backbone_hash_before: before,
                epochs: 0,
            });
        }
        Head::Linear(l) => l.clone(),
    };
    if spec.epochs == 0 {
        return Err(Error::Config("crt.epochs must be >= 1".into()));
    }
    let (_, features) = net.predict(&train.images, None, 64)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(4));
    if spec.reinit_classifier {
        let bound = 1.0 / (head.d as f64).sqrt();
        *net.params.get_mut(head.weight) =
            Tensor::uniform(vec![head.d, head.classes], bound, &mut rng).with_requires_grad(true);
        *net.params.get_mut(head.bias) =
            Tensor::uniform(vec![head.classes], bound, &mut rng).with_requires_grad(true);
    }
    let sampler = ClassBalancedSampler::new(&train.labels, train.classes)?;
    let loss = LossSpec::ce(vec![1; train.classes]);
    let mut opt = Sgd::new(0.9, 0.0);
    let steps = train.len().div_ceil(batch_size.max(1));
    for epoch in 0..spec.epochs {
        let lr_t = cosine_lr(lr, 0.0, epoch, spec.epochs);
        for _ in 0..steps {
            let idx = sampler.batch(batch_size, &mut rng);
            let tape = Tape::new();
            let f = tape.constant(features.gather_rows(&idx));
            let w = tape.param(net.params.get(head.weight).clone());
            let b = tape.param(net.params.get(head.bias).clone());
            let z = tape.matmul(f, w)?;
            let z = tape.broadcast_add(z, b)?;
            let labels: Vec<usize> = idx.iter().map(|&i| train.labels[i]).collect();
            let l = loss_on(&tape, &loss, z, &labels, 0.0)?;
            let mut g = tape.backward(l)?;
            let grads = [g.take(w), g.take(b)];
            let (wi, bi) = (head.weight.0, head.bias.0);
            let params = net.params.params_mut();
            let (lo, hi) = params.split_at_mut(bi.max(wi));
            let (pw, pb) = if wi < bi {
                (&mut lo[wi].value, &mut hi[0].value)
            } else {
                (&mut hi[0].value, &mut lo[bi].value)
            };
            opt.step(&mut [pw, pb], &grads, lr_t);
        }
    }
    Ok(CrtOutcome {
        notice: None,
        backbone_hash_after: net.backbone_hash(),
        backbone_hash_before: before,
        epochs: spec.epochs,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupThresholds {
    /// Classes with more than `many * n_max` training samples are "many".
    pub many: f64,
    /// Classes with fewer than `few * n_max` training samples are "few".
    pub few: f64,
}

impl Default for GroupThresholds {
    fn default() -> Self {
        Self {
            many: 2.0 / 3.0,
            few: 1.0 / 9.0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GroupAccuracy {
    pub classes: Vec<usize>,
    /// Mean per-class accuracy; `None` for an empty group.
    pub accuracy: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub overall_accuracy: f64,
    pub per_class_accuracy: Vec<f64>,
    pub many: GroupAccuracy,
    pub medium: GroupAccuracy,
    pub few: GroupAccuracy,
    pub parameter_count: usize,
    pub config_hash: String,
    pub seed: u64,
}

/// Scores `logits` against `test`, grouping classes by their training counts.
pub fn evaluate_logits(
    logits: &Tensor,
    test: &LabeledDataset,
    train_counts: &[usize],
    thresholds: GroupThresholds,
) -> Result<(f64, Vec<f64>, [GroupAccuracy; 3])> {
    let c = test.classes;
    if train_counts.len() != c || logits.shape() != [test.len(), c] {
        return Err(Error::ShapeMismatch {
            op: "evaluate",
            lhs: logits.shape().to_vec(),
            rhs: vec![test.len(), c],
        });
    }
    let mut correct = vec![0usize; c];
    let mut total = vec![0usize; c];
    for (i, &l) in test.labels.iter().enumerate() {
        total[l] += 1;
        if argmax(&logits.data()[i * c..(i + 1) * c]) == l {
            correct[l] += 1;
        }
    }
    if let Some(k) = total.iter().position(|&t| t == 0) {
        return Err(Error::InvalidArgument(format!(
            "class {k} is absent from the test set"
        )));
    }
    let per_class: Vec<f64> = (0..c)
        .map(|k| correct[k] as f64 / total[k] as f64)
        .collect();
    let overall = correct.iter().sum::<usize>() as f64 / test.len() as f64;
    let n_max = *train_counts.iter().max().unwrap_or(&0) as f64;
    let mut groups: [GroupAccuracy; 3] = Default::default();
    for (k, &n) in train_counts.iter().enumerate() {
        let n = n as f64;
        let g = if n > thresholds.many * n_max {
            0
        } else if n < thresholds.few * n_max {
            2
        } else {
            1
        };
        groups[g].classes.push(k);
    }
    for g in &mut groups {
        if !g.classes.is_empty() {
            let right: usize = g.classes.iter().map(|&k| correct[k]).sum();
            let all: usize = g.classes.iter().map(|&k| total[k]).sum();
            g.accuracy = Some(right as f64 / all as f64);
        }
    }
    Ok((overall, per_class, groups))
}

pub fn evaluate<M: Model>(
    model: &mut M,
    test: &LabeledDataset,
    train_counts: &[usize],
    thresholds: GroupThresholds,
    config_hash: &str,
    seed: u64,
) -> Result<EvalReport> {
    let logits = model.logits(&test.images)?;
    let (overall, per_class, [many, medium, few]) =
        evaluate_logits(&logits, test, train_counts, thresholds)?;
    Ok(EvalReport {
        overall_accuracy: overall,
        per_class_accuracy: per_class,
        many,
        medium,
        few,
        parameter_count: model.parameter_count(),
        config_hash: config_hash.to_string(),
        seed,
    })
}

/// Recipe name for logs: the loss kind plus active extras.
pub fn recipe_label(cfg: &TrainConfig) -> String {
    let (loss, mixup, crt) = cfg.resolved();
    let mut s = match loss.kind {
        LossKind::Ce => "ce".to_string(),
        LossKind::Ldam => "ldam".to_string(),
    };
    if loss.drw {
        s.push_str("-drw");
    }
    if mixup.enabled {
        s.push_str("+mixup");
    }
    if crt.is_some() {
        s.push_str("+crt");
    }
    s
}
