//! Re-balancing for long-tailed training: cross-entropy, LDAM margins with
//! deferred re-weighting, Mixup and the class-balanced sampler used by cRT.

use rand::Rng;
use rand_distr::{Beta, Distribution};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Ce,
    Ldam,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DrwSpec {
    /// Fraction of training after which class weights switch on.
    pub start_fraction: f64,
    /// Effective-number decay.
    pub beta: f64,
}

impl Default for DrwSpec {
    fn default() -> Self {
        Self {
            start_fraction: 0.8,
            beta: 0.9999,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossSpec {
    pub kind: LossKind,
    pub drw: Option<DrwSpec>,
    pub class_counts: Vec<usize>,
    pub ldam_scale: f64,
    pub ldam_max_margin: f64,
}

impl LossSpec {
    pub fn ce(class_counts: Vec<usize>) -> Self {
        Self {
            kind: LossKind::Ce,
            drw: None,
            class_counts,
            ldam_scale: 30.0,
            ldam_max_margin: 0.5,
        }
    }

    pub fn ldam_drw(class_counts: Vec<usize>) -> Self {
        Self {
            kind: LossKind::Ldam,
            drw: Some(DrwSpec::default()),
            ..Self::ce(class_counts)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.class_counts.is_empty() || self.class_counts.contains(&0) {
            return Err(Error::InvalidArgument(
                "class counts must be positive".into(),
            ));
        }
        if let Some(d) = self.drw {
            if !(d.start_fraction > 0.0 && d.start_fraction < 1.0) {
                return Err(Error::InvalidArgument(format!(
                    "drw start fraction must be in (0, 1), got {}",
                    d.start_fraction
                )));
            }
            if !(d.beta > 0.0 && d.beta < 1.0) {
                return Err(Error::InvalidArgument(format!(
                    "drw beta must be in (0, 1), got {}",
                    d.beta
                )));
            }
        }
        Ok(())
    }

    /// Per-sample class weights in force at `epoch_fraction`.
    pub fn class_weights(&self, epoch_fraction: f64) -> Vec<f64> {
        match self.drw {
            Some(d) if epoch_fraction >= d.start_fraction => {
                drw_weights(&self.class_counts, d.beta)
            }
            _ => vec![1.0; self.class_counts.len()],
        }
    }
}

/// Loss selection as written in configuration files.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub kind: LossKind,
    pub drw: bool,
    pub drw_start: f64,
    pub drw_beta: f64,
    pub ldam_scale: f64,
    pub ldam_max_margin: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            kind: LossKind::Ce,
            drw: false,
            drw_start: 0.8,
            drw_beta: 0.9999,
            ldam_scale: 30.0,
            ldam_max_margin: 0.5,
        }
    }
}

impl LossConfig {
    pub fn spec(&self, class_counts: Vec<usize>) -> LossSpec {
        LossSpec {
            kind: self.kind,
            drw: self.drw.then_some(DrwSpec {
                start_fraction: self.drw_start,
                beta: self.drw_beta,
            }),
            class_counts,
            ldam_scale: self.ldam_scale,
            ldam_max_margin: self.ldam_max_margin,
        }
    }
}

/// `Delta_j = k / n_j^(1/4)` with `k` chosen so the largest margin is `max_margin`.
pub fn ldam_margins(counts: &[usize], max_margin: f64) -> Vec<f64> {
    let raw: Vec<f64> = counts
        .iter()
        .map(|&n| 1.0 / (n as f64).powf(0.25))
        .collect();
    let top = raw.iter().copied().fold(0.0, f64::max);
    raw.iter().map(|r| max_margin * r / top).collect()
}

/// Effective-number weights `(1 - beta) / (1 - beta^n_j)`, normalized to sum to `C`.
pub fn drw_weights(counts: &[usize], beta: f64) -> Vec<f64> {
    let raw: Vec<f64> = counts
        .iter()
        .map(|&n| (1.0 - beta) / (1.0 - beta.powf(n as f64)))
        .collect();
    let total: f64 = raw.iter().sum();
    raw.iter()
        .map(|w| w * counts.len() as f64 / total)
        .collect()
}

fn check_labels(labels: &[usize], classes: usize) -> Result<()> {
    match labels.iter().find(|&&l| l >= classes) {
        Some(&label) => Err(Error::LabelOutOfRange { label, classes }),
        None => Ok(()),
    }
}

/// Loss on a tape. `logits` is `(N, C)`.
pub fn loss_on(
    tape: &Tape,
    spec: &LossSpec,
    logits: Var,
    labels: &[usize],
    epoch_fraction: f64,
) -> Result<Var> {
    spec.validate()?;
    let shape = tape.shape(logits);
    if shape.len() != 2 || shape[1] != spec.class_counts.len() {
        return Err(Error::ShapeMismatch {
            op: "loss",
            lhs: shape,
            rhs: vec![labels.len(), spec.class_counts.len()],
        });
    }
    let classes = shape[1];
    check_labels(labels, classes)?;
    let cw = spec.class_weights(epoch_fraction);
    let weights: Vec<f64> = labels.iter().map(|&l| cw[l]).collect();
    let z = match spec.kind {
        LossKind::Ce => logits,
        LossKind::Ldam => {
            let margins = ldam_margins(&spec.class_counts, spec.ldam_max_margin);
            let mut m = vec![0.0; labels.len() * classes];
            for (i, &l) in labels.iter().enumerate() {
                m[i * classes + l] = margins[l];
            }
            let m = tape.constant(Tensor::new(vec![labels.len(), classes], m)?);
            let shifted = tape.sub(logits, m)?;
            tape.scale(shifted, spec.ldam_scale)?
        }
    };
    let logp = tape.log_softmax(z, 1)?;
    tape.nll(logp, labels, &weights)
}

/// Concrete loss value.
pub fn loss(
    spec: &LossSpec,
    logits: &Tensor,
    labels: &[usize],
    epoch_fraction: f64,
) -> Result<f64> {
    let tape = Tape::new();
    let z = tape.constant(logits.clone());
    let l = loss_on(&tape, spec, z, labels, epoch_fraction)?;
    let v = tape.value(l).item();
    Ok(v)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MixupSpec {
    pub enabled: bool,
    pub beta_param: f64,
}

impl Default for MixupSpec {
    fn default() -> Self {
        Self {
            enabled: false,
            beta_param: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MixedBatch {
    pub images: Tensor,
    pub labels_a: Vec<usize>,
    pub labels_b: Vec<usize>,
    pub lambda: f64,
}

/// `lambda * x + (1 - lambda) * x[perm]`.
pub fn mix_with(images: &Tensor, perm: &[usize], lambda: f64) -> Tensor {
    let other = images.gather_rows(perm);
    let data = images
        .data()
        .iter()
        .zip(other.data())
        .map(|(a, b)| lambda * a + (1.0 - lambda) * b)
        .collect();
    Tensor::new(images.shape().to_vec(), data).expect("same shape")
}

/// Mixes a batch with a shuffled copy of itself; `lambda ~ Beta(a, a)`.
/// Disabled specs and single-sample batches pass through with `lambda = 1`
/// and consume no randomness.
pub fn mixup_batch<R: Rng + ?Sized>(
    spec: &MixupSpec,
    images: &Tensor,
    labels: &[usize],
    rng: &mut R,
) -> Result<MixedBatch> {
    let n = labels.len();
    if !spec.enabled || n < 2 {
        return Ok(MixedBatch {
            images: images.clone(),
            labels_a: labels.to_vec(),
            labels_b: labels.to_vec(),
            lambda: 1.0,
        });
    }
    let dist = Beta::new(spec.beta_param, spec.beta_param)
        .map_err(|e| Error::InvalidArgument(format!("mixup beta: {e}")))?;
    let lambda = dist.sample(rng);
    let mut perm: Vec<usize> = (0..n).collect();
    use rand::seq::SliceRandom;
    perm.shuffle(rng);
    Ok(MixedBatch {
        images: mix_with(images, &perm, lambda),
        labels_a: labels.to_vec(),
        labels_b: perm.iter().map(|&i| labels[i]).collect(),
        lambda,
    })
}

/// `lambda * L(a) + (1 - lambda) * L(b)`; collapses to `L(a)` when `lambda = 1`.
pub fn mixed_loss_on(
    tape: &Tape,
    spec: &LossSpec,
    logits: Var,
    batch: &MixedBatch,
    epoch_fraction: f64,
) -> Result<Var> {
    let la = loss_on(tape, spec, logits, &batch.labels_a, epoch_fraction)?;
    if batch.lambda == 1.0 {
        return Ok(la);
    }
    let lb = loss_on(tape, spec, logits, &batch.labels_b, epoch_fraction)?;
    let a = tape.scale(la, batch.lambda)?;
    let b = tape.scale(lb, 1.0 - batch.lambda)?;
    tape.add(a, b)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CrtSpec {
    pub epochs: usize,
    pub reinit_classifier: bool,
}

impl Default for CrtSpec {
    fn default() -> Self {
        Self {
            epochs: 4,
            reinit_classifier: true,
        }
    }
}

/// Draws a class uniformly, then a sample of that class uniformly.
#[derive(Clone, Debug)]
pub struct ClassBalancedSampler {
    by_class: Vec<Vec<usize>>,
}

impl ClassBalancedSampler {
    pub fn new(labels: &[usize], classes: usize) -> Result<Self> {
        let mut by_class = vec![Vec::new(); classes];
        for (i, &l) in labels.iter().enumerate() {
            if l >= classes {
                return Err(Error::LabelOutOfRange { label: l, classes });
            }
            by_class[l].push(i);
        }
        by_class.retain(|c| !c.is_empty());
        if by_class.is_empty() {
            return Err(Error::InvalidArgument(
                "sampler needs at least one sample".into(),
            ));
        }
        Ok(Self { by_class })
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        let c = &self.by_class[rng.random_range(0..self.by_class.len())];
        c[rng.random_range(0..c.len())]
    }

    pub fn batch<R: Rng + ?Sized>(&self, size: usize, rng: &mut R) -> Vec<usize> {
        (0..size).map(|_| self.sample(rng)).collect()
    }
}

/// Named training recipes: `ce`, `ce+mixup`, `ldam-drw`, `mixup+crt`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Recipe {
    #[serde(rename = "ce")]
    Ce,
    #[serde(rename = "ce+mixup")]
    CeMixup,
    #[serde(rename = "ldam-drw")]
    LdamDrw,
    #[serde(rename = "mixup+crt")]
    MixupCrt,
}

impl Recipe {
    pub fn loss_kind(self) -> LossKind {
        if self == Recipe::LdamDrw {
            LossKind::Ldam
        } else {
            LossKind::Ce
        }
    }

    pub fn uses_drw(self) -> bool {
        self == Recipe::LdamDrw
    }

    pub fn uses_mixup(self) -> bool {
        matches!(self, Recipe::CeMixup | Recipe::MixupCrt)
    }

    pub fn uses_crt(self) -> bool {
        self == Recipe::MixupCrt
    }
}
