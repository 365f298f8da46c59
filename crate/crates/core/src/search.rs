//! Alternating weight / architecture optimization with per-epoch diagnostics:
//! classifier weight norms and angles, and the dominant eigenvalue of the
//! validation-loss Hessian with respect to the architecture parameters.

use std::fs::File;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Gradients, Tape, Var};
use crate::data::{shuffled_batches, LabeledDataset};
use crate::error::{Error, Result};
use crate::etf::{column_norms, pairwise_cosines};
use crate::nn::ParamStore;
use crate::optim::{clip_grad_norm, cosine_lr, Adam, AdamConfig, Sgd, SgdConfig};
use crate::rebalance::{loss_on, LossConfig, LossSpec};
use crate::supernet::{
    derive_genotype, max_row_sum_deviation, ArchConfig, ArchParams, ClassifierKind, ForwardOptions,
    Genotype, GenotypeMeta, Network, Trainable,
};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Order {
    First,
    Second,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HessianProbe {
    pub power_iters: usize,
    /// Relative eigenvalue change that counts as converged.
    pub tol: f64,
    /// Finite-difference step is `fd_scale * (1 + max |alpha|)`.
    pub fd_scale: f64,
    /// Samples of the architecture split used as the fixed probe batch.
    pub batch_size: usize,
}

impl Default for HessianProbe {
    fn default() -> Self {
        Self {
            power_iters: 20,
            tol: 1e-4,
            fd_scale: 1e-3,
            batch_size: 32,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SearchConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Fraction of the training set used for weights; the rest drives the architecture.
    pub split_fraction: f64,
    pub w_optimizer: SgdConfig,
    pub alpha_optimizer: AdamConfig,
    pub order: Order,
    pub classifier: ClassifierKind,
    pub loss: LossConfig,
    pub probe_every: usize,
    pub probe: HessianProbe,
    /// Write the architecture parameters at every probe epoch.
    pub dump_alpha: bool,
    pub seed: u64,
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 16,
            split_fraction: 0.5,
            w_optimizer: SgdConfig::default(),
            alpha_optimizer: AdamConfig::default(),
            order: Order::First,
            classifier: ClassifierKind::Etf,
            loss: LossConfig::default(),
            probe_every: 5,
            probe: HessianProbe::default(),
            dump_alpha: false,
            seed: 0,
        }
    }
}

impl SearchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("search.batch_size must be positive".into()));
        }
        if !(self.w_optimizer.lr > 0.0 && self.alpha_optimizer.lr >= 0.0) {
            return Err(Error::Config(
                "search learning rates must be positive".into(),
            ));
        }
        if self.probe_every == 0 || self.probe.power_iters == 0 || !(self.probe.fd_scale > 0.0) {
            return Err(Error::Config(
                "search.probe_every, probe.power_iters and probe.fd_scale must be positive".into(),
            ));
        }
        if !(self.split_fraction > 0.0 && self.split_fraction < 1.0) {
            return Err(Error::Config(
                "search.split_fraction must be in (0, 1)".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    /// Rayleigh quotient of the extreme eigenvalue (largest magnitude, signed).
    pub eigenvalue: f64,
    /// `||Hv - lambda v|| / max(|lambda|, 1e-12)` at the final iterate.
    pub residual: f64,
    pub iterations: usize,
    pub converged: bool,
    pub fd_step: f64,
}

/// Power iteration on finite-difference Hessian-vector products
/// `Hv ~ (g(a + eps v) - g(a - eps v)) / (2 eps)` of the gradient `grad`.
pub fn hessian_lambda_max<G>(
    probe: &HessianProbe,
    mut grad: G,
    alpha: &[f64],
) -> Result<ProbeResult>
where
    G: FnMut(&[f64]) -> Result<Vec<f64>>,
{
    if probe.power_iters == 0 || !(probe.fd_scale > 0.0) || alpha.is_empty() {
        return Err(Error::InvalidArgument(
            "probe needs iterations, a positive step and a point".into(),
        ));
    }
    let eps = probe.fd_scale * (1.0 + alpha.iter().fold(0.0f64, |m, v| m.max(v.abs())));
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let mut v = Tensor::randn(vec![alpha.len()], 1.0, &mut rng).into_data();
    normalize(&mut v);
    let mut hvp = |v: &[f64]| -> Result<Vec<f64>> {
        let plus: Vec<f64> = alpha.iter().zip(v).map(|(a, d)| a + eps * d).collect();
        let minus: Vec<f64> = alpha.iter().zip(v).map(|(a, d)| a - eps * d).collect();
        let gp = grad(&plus)?;
        let gm = grad(&minus)?;
        Ok(gp
            .iter()
            .zip(&gm)
            .map(|(p, m)| (p - m) / (2.0 * eps))
            .collect())
    };
    let mut lambda = 0.0;
    let mut residual = 0.0;
    let mut converged = false;
    let mut iterations = 0;
    for it in 1..=probe.power_iters {
        iterations = it;
        let hv = hvp(&v)?;
        let new_lambda: f64 = v.iter().zip(&hv).map(|(a, b)| a * b).sum();
        let r: f64 = hv
            .iter()
            .zip(&v)
            .map(|(h, x)| (h - new_lambda * x).powi(2))
            .sum::<f64>()
            .sqrt();
        residual = r / new_lambda.abs().max(1e-12);
        let hv_norm = hv.iter().map(|x| x * x).sum::<f64>().sqrt();
        if hv_norm < 1e-12 {
            lambda = new_lambda;
            residual = 0.0;
            converged = true;
            break;
        }
        let delta = (new_lambda - lambda).abs();
        lambda = new_lambda;
        v = hv;
        normalize(&mut v);
        if it > 1 && delta <= probe.tol * lambda.abs().max(1e-12) {
            converged = true;
            break;
        }
    }
    Ok(ProbeResult {
        eigenvalue: lambda,
        residual,
        iterations,
        converged,
        fd_step: eps,
    })
}

fn normalize(v: &mut [f64]) {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
}

/// Sample standard deviation below `1e-9` relative to the mean magnitude is
/// reported as exactly zero.
fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (0.0, 0.0);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt();
    let floor = 1e-9 * mean.abs().max(f64::MIN_POSITIVE);
    (mean, if std < floor { 0.0 } else { std })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AngleSummary {
    pub min: f64,
    pub max: f64,
    pub mean: f64,
    pub std: f64,
}

/// Pairwise angles, in degrees, between classifier weight columns.
pub fn angle_summary(w: &Tensor) -> AngleSummary {
    let angles: Vec<f64> = pairwise_cosines(w)
        .iter()
        .map(|c| c.clamp(-1.0, 1.0).acos().to_degrees())
        .collect();
    let (mean, std) = mean_std(&angles);
    AngleSummary {
        min: angles.iter().copied().fold(f64::INFINITY, f64::min),
        max: angles.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        mean,
        std,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_balanced_acc: f64,
    pub alpha_hash: String,
    /// Largest `|sum(softmax row) - 1|` seen over the epoch's steps.
    pub mix_sum_max_dev: f64,
    pub norm_mean: f64,
    pub norm_std: f64,
    pub angles: AngleSummary,
    pub lambda_max: Option<f64>,
    pub lambda_residual: Option<f64>,
    pub lambda_converged: Option<bool>,
    pub class_norms: Vec<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SearchTrace {
    pub classifier: Option<ClassifierKind>,
    pub records: Vec<EpochRecord>,
}

fn opt_str<T: ToString>(v: Option<T>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn parse_opt<T: std::str::FromStr>(s: &str) -> Result<Option<T>> {
    if s.is_empty() {
        return Ok(None);
    }
    s.parse()
        .map(Some)
        .map_err(|_| Error::Format(format!("bad trace value {s:?}")))
}

impl EpochRecord {
    fn header(classes: usize) -> Vec<String> {
        let mut h: Vec<String> = [
            "epoch",
            "lr",
            "train_loss",
            "val_loss",
            "val_balanced_acc",
            "alpha_hash",
            "mix_sum_max_dev",
            "norm_mean",
            "norm_std",
            "angle_min",
            "angle_max",
            "angle_mean",
            "angle_std",
            "lambda_max",
            "lambda_residual",
            "lambda_converged",
        ]
        .iter()
        .map(|s| s.to_string())
        .collect();
        h.extend((0..classes).map(|k| format!("norm_{k}")));
        h
    }

    fn row(&self) -> Vec<String> {
        let mut r = vec![
            self.epoch.to_string(),
            self.lr.to_string(),
            self.train_loss.to_string(),
            self.val_loss.to_string(),
            self.val_balanced_acc.to_string(),
            self.alpha_hash.clone(),
            self.mix_sum_max_dev.to_string(),
            self.norm_mean.to_string(),
            self.norm_std.to_string(),
            self.angles.min.to_string(),
            self.angles.max.to_string(),
            self.angles.mean.to_string(),
            self.angles.std.to_string(),
            opt_str(self.lambda_max),
            opt_str(self.lambda_residual),
            opt_str(self.lambda_converged),
        ];
        r.extend(self.class_norms.iter().map(f64::to_string));
        r
    }

    fn from_row(r: &csv::StringRecord) -> Result<Self> {
        let f = |i: usize| -> Result<f64> {
            r.get(i)
                .unwrap_or("")
                .parse()
                .map_err(|_| Error::Format(format!("bad trace column {i}")))
        };
        let s = |i: usize| r.get(i).unwrap_or("");
        Ok(Self {
            epoch: s(0)
                .parse()
                .map_err(|_| Error::Format("bad epoch".into()))?,
            lr: f(1)?,
            train_loss: f(2)?,
            val_loss: f(3)?,
            val_balanced_acc: f(4)?,
            alpha_hash: s(5).to_string(),
            mix_sum_max_dev: f(6)?,
            norm_mean: f(7)?,
            norm_std: f(8)?,
            angles: AngleSummary {
                min: f(9)?,
                max: f(10)?,
                mean: f(11)?,
                std: f(12)?,
            },
            lambda_max: parse_opt(s(13))?,
            lambda_residual: parse_opt(s(14))?,
            lambda_converged: parse_opt(s(15))?,
            class_norms: (16..r.len()).map(f).collect::<Result<_>>()?,
        })
    }
}

impl SearchTrace {
    pub fn to_csv(&self) -> Result<String> {
        let classes = self.records.first().map_or(0, |r| r.class_norms.len());
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(EpochRecord::header(classes))?;
        for r in &self.records {
            w.write_record(r.row())?;
        }
        String::from_utf8(w.into_inner().map_err(|e| Error::Format(e.to_string()))?)
            .map_err(|e| Error::Format(e.to_string()))
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut rd = csv::Reader::from_reader(text.as_bytes());
        let records = rd
            .records()
            .map(|r| EpochRecord::from_row(&r?))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            classifier: None,
            records,
        })
    }
}

/// Appends one CSV row per epoch, flushing after each.
struct TraceWriter {
    w: csv::Writer<File>,
    header_written: bool,
}

impl TraceWriter {
    fn create(path: &Path) -> Result<Self> {
        Ok(Self {
            w: csv::Writer::from_path(path)?,
            header_written: false,
        })
    }

    fn push(&mut self, r: &EpochRecord) -> Result<()> {
        if !self.header_written {
            self.w
                .write_record(EpochRecord::header(r.class_norms.len()))?;
            self.header_written = true;
        }
        self.w.write_record(r.row())?;
        self.w.flush()?;
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BiasRow {
    pub epoch: usize,
    pub norms: Vec<f64>,
    pub norm_std: f64,
    pub angles: AngleSummary,
    /// `||norms_t - norms_{t-1}||`.
    pub step_drift: f64,
    /// `||norms_t - norms_1||`.
    pub drift_from_start: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BiasReport {
    pub rows: Vec<BiasRow>,
}

fn l2_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).powi(2))
        .sum::<f64>()
        .sqrt()
}

pub fn classifier_bias_report(trace: &SearchTrace) -> Result<BiasReport> {
    let first = trace
        .records
        .first()
        .ok_or_else(|| Error::InvalidArgument("empty trace".into()))?;
    let mut prev = &first.class_norms;
    let rows = trace
        .records
        .iter()
        .map(|r| {
            let row = BiasRow {
                epoch: r.epoch,
                norms: r.class_norms.clone(),
                norm_std: r.norm_std,
                angles: r.angles,
                step_drift: l2_diff(&r.class_norms, prev),
                drift_from_start: l2_diff(&r.class_norms, &first.class_norms),
            };
            prev = &r.class_norms;
            row
        })
        .collect();
    Ok(BiasReport { rows })
}

impl BiasReport {
    pub fn to_csv(&self) -> Result<String> {
        let classes = self.rows.first().map_or(0, |r| r.norms.len());
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header: Vec<String> = [
            "epoch",
            "norm_std",
            "angle_min",
            "angle_max",
            "angle_mean",
            "angle_std",
            "step_drift",
            "drift_from_start",
        ]
        .iter()
        .map(|s| s.to_string())
        .collect();
        header.extend((0..classes).map(|k| format!("norm_{k}")));
        w.write_record(&header)?;
        for r in &self.rows {
            let mut rec = vec![
                r.epoch.to_string(),
                r.norm_std.to_string(),
                r.angles.min.to_string(),
                r.angles.max.to_string(),
                r.angles.mean.to_string(),
                r.angles.std.to_string(),
                r.step_drift.to_string(),
                r.drift_from_start.to_string(),
            ];
            rec.extend(r.norms.iter().map(f64::to_string));
            w.write_record(&rec)?;
        }
        String::from_utf8(w.into_inner().map_err(|e| Error::Format(e.to_string()))?)
            .map_err(|e| Error::Format(e.to_string()))
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut rd = csv::Reader::from_reader(text.as_bytes());
        let mut rows = Vec::new();
        for rec in rd.records() {
            let rec = rec?;
            let f = |i: usize| -> Result<f64> {
                rec.get(i)
                    .unwrap_or("")
                    .parse()
                    .map_err(|_| Error::Format(format!("bad bias column {i}")))
            };
            rows.push(BiasRow {
                epoch: rec
                    .get(0)
                    .unwrap_or("")
                    .parse()
                    .map_err(|_| Error::Format("bad epoch".into()))?,
                norm_std: f(1)?,
                angles: AngleSummary {
                    min: f(2)?,
                    max: f(3)?,
                    mean: f(4)?,
                    std: f(5)?,
                },
                step_drift: f(6)?,
                drift_from_start: f(7)?,
                norms: (8..rec.len()).map(f).collect::<Result<_>>()?,
            });
        }
        Ok(Self { rows })
    }
}

/// Data for one search run.
pub struct SearchData<'a> {
    pub w_set: &'a LabeledDataset,
    pub alpha_set: &'a LabeledDataset,
    /// Balanced held-out set used for the per-epoch accuracy column.
    pub test: &'a LabeledDataset,
    /// Per-class counts of the full training set (loss re-balancing).
    pub class_counts: Vec<usize>,
}

/// Optional side outputs of a search run.
#[derive(Clone, Debug, Default)]
pub struct SearchIo {
    pub trace_csv: Option<PathBuf>,
    /// Directory for alpha dumps and divergence snapshots.
    pub snapshot_dir: Option<PathBuf>,
    pub config_hash: String,
}

pub struct SearchOutcome {
    pub alpha: ArchParams,
    pub genotype: Genotype,
    pub trace: SearchTrace,
    pub network: Network,
    /// Hash of the classifier weights at the start and end of the run.
    pub classifier_hash: (String, String),
    pub warnings: Vec<String>,
}

#[derive(Serialize)]
struct DivergenceSnapshot<'a> {
    epoch: usize,
    step: usize,
    reason: String,
    alpha: &'a ArchParams,
    last_train_loss: f64,
    last_val_loss: f64,
    rng_state: String,
}

fn collect_grads(g: &mut Gradients, vars: &[Var]) -> Vec<Option<Tensor>> {
    vars.iter().map(|&v| g.take(v)).collect()
}

fn param_refs(store: &mut ParamStore) -> Vec<&mut Tensor> {
    store
        .params_mut()
        .iter_mut()
        .map(|p| &mut p.value)
        .collect()
}

/// Per-class mean accuracy from logits.
pub fn balanced_accuracy(logits: &Tensor, labels: &[usize], classes: usize) -> f64 {
    let mut correct = vec![0usize; classes];
    let mut total = vec![0usize; classes];
    for (i, &l) in labels.iter().enumerate() {
        let row = &logits.data()[i * classes..(i + 1) * classes];
        total[l] += 1;
        if argmax(row) == l {
            correct[l] += 1;
        }
    }
    let present: Vec<f64> = (0..classes)
        .filter(|&k| total[k] > 0)
        .map(|k| correct[k] as f64 / total[k] as f64)
        .collect();
    present.iter().sum::<f64>() / present.len().max(1) as f64
}

/// First index of the maximum.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

struct Engine<'a> {
    cfg: &'a SearchConfig,
    net: Network,
    alpha: ArchParams,
    loss: LossSpec,
}

impl Engine<'_> {
    /// Training loss and weight gradients at the current weights.
    fn weight_grads(
        &mut self,
        images: &Tensor,
        labels: &[usize],
        frac: f64,
        opts: ForwardOptions,
    ) -> Result<(f64, Vec<Option<Tensor>>, f64)> {
        let tape = Tape::new();
        let x = tape.constant(images.clone());
        let a = self.alpha.bind(&tape, false)?;
        let mix_dev = max_row_sum_deviation(&tape.value(a.w_normal))
            .max(max_row_sum_deviation(&tape.value(a.w_reduce)));
        let out = self.net.forward(&tape, x, Some(&a), opts)?;
        let l = loss_on(&tape, &self.loss, out.logits, labels, frac)?;
        let lv = tape.value(l).item();
        let mut g = tape.backward(l)?;
        Ok((lv, collect_grads(&mut g, &out.vars), mix_dev))
    }

    /// Loss and flattened architecture gradient with weights held fixed.
    fn alpha_grad_at(
        &mut self,
        alpha: &ArchParams,
        images: &Tensor,
        labels: &[usize],
        frac: f64,
    ) -> Result<(f64, Vec<f64>)> {
        let tape = Tape::new();
        let x = tape.constant(images.clone());
        let a = alpha.bind(&tape, true)?;
        let out = self
            .net
            .forward(&tape, x, Some(&a), ForwardOptions::probe())?;
        let l = loss_on(&tape, &self.loss, out.logits, labels, frac)?;
        let lv = tape.value(l).item();
        let mut g = tape.backward(l)?;
        let gn = g
            .take(a.normal)
            .unwrap_or_else(|| Tensor::zeros(alpha.normal.shape().to_vec()));
        let gr = g
            .take(a.reduce)
            .unwrap_or_else(|| Tensor::zeros(alpha.reduce.shape().to_vec()));
        Ok((lv, gn.data().iter().chain(gr.data()).copied().collect()))
    }

    /// Gradients of the loss at the current weights for both weights and alpha.
    fn joint_grads(
        &mut self,
        images: &Tensor,
        labels: &[usize],
        frac: f64,
    ) -> Result<(f64, Vec<Option<Tensor>>, Vec<f64>)> {
        let tape = Tape::new();
        let x = tape.constant(images.clone());
        let a = self.alpha.bind(&tape, true)?;
        let opts = ForwardOptions {
            trainable: Trainable::All,
            ..ForwardOptions::probe()
        };
        let out = self.net.forward(&tape, x, Some(&a), opts)?;
        let l = loss_on(&tape, &self.loss, out.logits, labels, frac)?;
        let lv = tape.value(l).item();
        let mut g = tape.backward(l)?;
        let gw = collect_grads(&mut g, &out.vars);
        let gn = g
            .take(a.normal)
            .unwrap_or_else(|| Tensor::zeros(self.alpha.normal.shape().to_vec()));
        let gr = g
            .take(a.reduce)
            .unwrap_or_else(|| Tensor::zeros(self.alpha.reduce.shape().to_vec()));
        Ok((lv, gw, gn.data().iter().chain(gr.data()).copied().collect()))
    }

    fn add_scaled(&mut self, dirs: &[Option<Tensor>], scale: f64) {
        for (p, d) in self.net.params.params_mut().iter_mut().zip(dirs) {
            if let Some(d) = d {
                for (w, g) in p.value.data_mut().iter_mut().zip(d.data()) {
                    *w += scale * g;
                }
            }
        }
    }

    /// Unrolled architecture gradient:
    /// `grad_a L_val(w', a) - xi * (grad_a L_train(w+, a) - grad_a L_train(w-, a)) / (2 eps)`
    /// with `w' = w - xi * grad_w L_train(w, a)` and `w+- = w +- eps * grad_w' L_val(w', a)`.
    fn second_order_grad(
        &mut self,
        wb: (&Tensor, &[usize]),
        ab: (&Tensor, &[usize]),
        xi: f64,
        frac: f64,
    ) -> Result<(f64, Vec<f64>)> {
        let saved: Vec<Tensor> = self
            .net
            .params
            .params()
            .iter()
            .map(|p| p.value.clone())
            .collect();
        let (_, gw, _) =
            self.weight_grads(wb.0, wb.1, frac, ForwardOptions::probe().with_trainable())?;
        let wd = self.cfg.w_optimizer.weight_decay;
        let step: Vec<Option<Tensor>> = gw
            .iter()
            .zip(&saved)
            .map(|(g, w)| {
                g.as_ref().map(|g| {
                    let data = g
                        .data()
                        .iter()
                        .zip(w.data())
                        .map(|(gi, wi)| gi + wd * wi)
                        .collect();
                    Tensor::new(g.shape().to_vec(), data).expect("same shape")
                })
            })
            .collect();
        self.add_scaled(&step, -xi);
        let (val_loss, dw, mut da) = self.joint_grads(ab.0, ab.1, frac)?;
        self.restore(&saved);

        let norm = dw
            .iter()
            .flatten()
            .map(|t| t.data().iter().map(|v| v * v).sum::<f64>())
            .sum::<f64>()
            .sqrt();
        if norm > 0.0 {
            let eps = 0.01 / norm;
            let alpha = self.alpha.clone();
            self.add_scaled(&dw, eps);
            let (_, gp) = self.alpha_grad_at(&alpha, wb.0, wb.1, frac)?;
            self.restore(&saved);
            self.add_scaled(&dw, -eps);
            let (_, gm) = self.alpha_grad_at(&alpha, wb.0, wb.1, frac)?;
            self.restore(&saved);
            for ((d, p), m) in da.iter_mut().zip(&gp).zip(&gm) {
                *d -= xi * (p - m) / (2.0 * eps);
            }
        }
        Ok((val_loss, da))
    }

    fn restore(&mut self, saved: &[Tensor]) {
        for (p, s) in self.net.params.params_mut().iter_mut().zip(saved) {
            p.value = s.clone();
        }
    }

    fn probe(&mut self, images: &Tensor, labels: &[usize], frac: f64) -> Result<ProbeResult> {
        let alpha0 = self.alpha.clone();
        let flat = alpha0.flat();
        let probe = self.cfg.probe;
        hessian_lambda_max(
            &probe,
            |v| {
                let mut a = alpha0.clone();
                a.set_flat(v);
                Ok(self.alpha_grad_at(&a, images, labels, frac)?.1)
            },
            &flat,
        )
    }
}

impl ForwardOptions {
    fn with_trainable(mut self) -> Self {
        self.trainable = Trainable::All;
        self
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut f = File::create(path)?;
    serde_json::to_writer_pretty(&mut f, value)?;
    f.write_all(b"\n")?;
    Ok(())
}

fn diverged(e: Error, epoch: usize, step: usize) -> Error {
    match e {
        Error::NonFinite(reason) => Error::Diverged {
            epoch,
            step,
            reason,
        },
        other => other,
    }
}

/// Converts a non-finite failure into [`Error::Diverged`], writing a snapshot
/// when the run has a snapshot directory.
fn abort(
    e: Error,
    at: (usize, usize),
    io: &SearchIo,
    alpha: &ArchParams,
    losses: (f64, f64),
    rng_state: String,
) -> Error {
    let e = diverged(e, at.0, at.1);
    if let (Error::Diverged { reason, .. }, Some(dir)) = (&e, &io.snapshot_dir) {
        let snap = DivergenceSnapshot {
            epoch: at.0,
            step: at.1,
            reason: reason.clone(),
            alpha,
            last_train_loss: losses.0,
            last_val_loss: losses.1,
            rng_state,
        };
        if let Err(io_err) = std::fs::create_dir_all(dir)
            .map_err(Error::from)
            .and_then(|_| write_json(&dir.join("divergence_snapshot.json"), &snap))
        {
            return io_err;
        }
    }
    e
}

/// Runs the alternating search. Each step updates the weights on a batch of the
/// weight split, then the architecture on a batch of the architecture split.
pub fn search(
    cfg: &SearchConfig,
    arch: &ArchConfig,
    data: SearchData<'_>,
    io: &SearchIo,
) -> Result<SearchOutcome> {
    cfg.validate()?;
    arch.validate()?;
    let w_set = data.w_set;
    let a_set = data.alpha_set;
    if w_set.is_empty() || a_set.is_empty() {
        return Err(Error::InvalidArgument(
            "search needs non-empty weight and architecture splits".into(),
        ));
    }
    let classes = w_set.classes;
    let [ch, _, _] = w_set.image_shape();
    let mut warnings = Vec::new();
    for (k, &n) in a_set.per_class_counts().iter().enumerate() {
        if n == 0 {
            let w = format!("architecture split has no samples of class {k}");
            log::warn!("{w}");
            warnings.push(w);
        }
    }

    let net = Network::supernet(arch, ch, classes, cfg.classifier, cfg.seed)?;
    let catalog = arch.catalog()?;
    let alpha = ArchParams::random(arch.n_nodes, &catalog, cfg.seed.wrapping_add(1));
    let loss = cfg.loss.spec(data.class_counts.clone());
    loss.validate()?;
    let mut eng = Engine {
        cfg,
        net,
        alpha,
        loss,
    };
    let mut w_opt = Sgd::new(cfg.w_optimizer.momentum, cfg.w_optimizer.weight_decay);
    let mut a_opt = Adam::new(cfg.alpha_optimizer);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(2));
    let start_hash = eng.net.classifier_weights().content_hash();

    let probe_n = cfg.probe.batch_size.min(a_set.len());
    let (probe_x, probe_y) = a_set.batch(&(0..probe_n).collect::<Vec<_>>());

    let mut writer = io
        .trace_csv
        .as_deref()
        .map(TraceWriter::create)
        .transpose()?;
    let mut trace = SearchTrace {
        classifier: Some(cfg.classifier),
        records: Vec::new(),
    };
    let (mut last_train, mut last_val) = (f64::NAN, f64::NAN);

    for epoch in 0..cfg.epochs {
        let lr = cosine_lr(
            cfg.w_optimizer.lr,
            cfg.w_optimizer.lr_min,
            epoch,
            cfg.epochs,
        );
        let frac = epoch as f64 / cfg.epochs as f64;
        let w_batches = shuffled_batches(w_set.len(), cfg.batch_size, &mut rng);
        let mut a_batches = shuffled_batches(a_set.len(), cfg.batch_size, &mut rng);
        let (mut train_sum, mut val_sum, mut mix_dev) = (0.0, 0.0, 0.0f64);
        for (step, wb) in w_batches.iter().enumerate() {
            if a_batches.is_empty() {
                a_batches = shuffled_batches(a_set.len(), cfg.batch_size, &mut rng);
            }
            let ab = a_batches.remove(0);
            let (wx, wy) = w_set.batch(wb);
            let (ax, ay) = a_set.batch(&ab);

            let result = (|| -> Result<()> {
                let (lv, mut grads, dev) =
                    eng.weight_grads(&wx, &wy, frac, ForwardOptions::train())?;
                mix_dev = mix_dev.max(dev);
                clip_grad_norm(&mut grads, cfg.w_optimizer.grad_clip);
                w_opt.step(&mut param_refs(&mut eng.net.params), &grads, lr);
                last_train = lv;
                train_sum += lv;

                let (val, ga) = match cfg.order {
                    Order::First => {
                        let alpha = eng.alpha.clone();
                        eng.alpha_grad_at(&alpha, &ax, &ay, frac)?
                    }
                    Order::Second => eng.second_order_grad((&wx, &wy), (&ax, &ay), lr, frac)?,
                };
                last_val = val;
                val_sum += val;
                let ne = eng.alpha.normal.len();
                let grads = [
                    Some(Tensor::new(
                        eng.alpha.normal.shape().to_vec(),
                        ga[..ne].to_vec(),
                    )?),
                    Some(Tensor::new(
                        eng.alpha.reduce.shape().to_vec(),
                        ga[ne..].to_vec(),
                    )?),
                ];
                let [n, r] = eng.alpha.tensors_mut();
                a_opt.step(&mut [n, r], &grads);
                if !eng.alpha.normal.is_finite() || !eng.alpha.reduce.is_finite() {
                    return Err(Error::NonFinite("architecture parameters".into()));
                }
                Ok(())
            })();
            if let Err(e) = result {
                let rng_state = format!("{:?}", rng.get_word_pos());
                return Err(abort(
                    e,
                    (epoch + 1, step),
                    io,
                    &eng.alpha,
                    (last_train, last_val),
                    rng_state,
                ));
            }
        }
        let steps = w_batches.len() as f64;

        let rng_state = format!("{:?}", rng.get_word_pos());
        let (logits, _) = eng
            .net
            .predict(&data.test.images, Some(&eng.alpha), 64)
            .map_err(|e| {
                abort(
                    e,
                    (epoch + 1, 0),
                    io,
                    &eng.alpha,
                    (last_train, last_val),
                    rng_state.clone(),
                )
            })?;
        let acc = balanced_accuracy(&logits, &data.test.labels, classes);
        let w = eng.net.classifier_weights();
        let norms = column_norms(&w);
        let (norm_mean, norm_std) = mean_std(&norms);

        let last = epoch + 1 == cfg.epochs;
        let probe = if (epoch + 1) % cfg.probe_every == 0 || last {
            let p = match eng.probe(&probe_x, &probe_y, frac) {
                Ok(p) => p,
                Err(e) => {
                    return Err(abort(
                        e,
                        (epoch + 1, 0),
                        io,
                        &eng.alpha,
                        (last_train, last_val),
                        rng_state,
                    ))
                }
            };
            if cfg.dump_alpha {
                if let Some(dir) = &io.snapshot_dir {
                    std::fs::create_dir_all(dir)?;
                    write_json(
                        &dir.join(format!("alpha_epoch{}.json", epoch + 1)),
                        &eng.alpha,
                    )?;
                }
            }
            Some(p)
        } else {
            None
        };
        let rec = EpochRecord {
            epoch: epoch + 1,
            lr,
            train_loss: train_sum / steps,
            val_loss: val_sum / steps,
            val_balanced_acc: acc,
            alpha_hash: eng.alpha.content_hash(),
            mix_sum_max_dev: mix_dev,
            norm_mean,
            norm_std,
            angles: angle_summary(&w),
            lambda_max: probe.map(|p| p.eigenvalue),
            lambda_residual: probe.map(|p| p.residual),
            lambda_converged: probe.map(|p| p.converged),
            class_norms: norms,
        };
        log::info!(
            "search epoch {}: train {:.4} val {:.4} acc {:.3} norm_std {:.3e}{}",
            rec.epoch,
            rec.train_loss,
            rec.val_loss,
            rec.val_balanced_acc,
            rec.norm_std,
            rec.lambda_max
                .map(|l| format!(" lambda {l:.4}"))
                .unwrap_or_default()
        );
        if let Some(w) = writer.as_mut() {
            w.push(&rec)?;
        }
        trace.records.push(rec);
    }

    let mut genotype = derive_genotype(&eng.alpha)?;
    genotype.meta = GenotypeMeta {
        seed: cfg.seed,
        epoch: cfg.epochs,
        config_hash: io.config_hash.clone(),
    };
    let end_hash = eng.net.classifier_weights().content_hash();
    Ok(SearchOutcome {
        alpha: eng.alpha,
        genotype,
        trace,
        network: eng.net,
        classifier_hash: (start_hash, end_hash),
        warnings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn probe_on_diagonal_quadratic() {
        let a = [3.0, 1.0];
        let p = hessian_lambda_max(
            &HessianProbe {
                power_iters: 200,
                tol: 1e-12,
                ..Default::default()
            },
            |x| Ok(x.iter().zip(&a).map(|(v, d)| v * d).collect()),
            &[0.3, -0.2],
        )
        .unwrap();
        assert!((p.eigenvalue - 3.0).abs() < 1e-6, "{p:?}");
        assert!(p.converged);
    }

    #[test]
    fn mean_std_noise_floor() {
        assert_eq!(mean_std(&[1.0, 1.0 + 1e-15, 1.0 - 1e-15]).1, 0.0);
        assert!(mean_std(&[1.0, 2.0]).1 > 0.0);
    }
}
