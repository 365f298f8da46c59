//! Long-tailed datasets: class-count profiles, synthetic pattern images,
//! stratified splits and the flat binary file format.
//!
//! # Binary format
//!
//! All integers are little-endian `u32`, pixels little-endian `f64`.
//!
//! ```text
//! offset  size        field
//! 0       4           magic "TNDS"
//! 4       4           version (1)
//! 8       4           classes C
//! 12      4           samples N
//! 16      4           channels
//! 20      4           height H
//! 24      4           width W
//! 28      4*N         labels
//! 28+4N   8*N*ch*H*W  pixels, row-major (N, ch, H, W)
//! ```

use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: [u8; 4] = *b"TNDS";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LongTailSpec {
    pub classes: usize,
    pub n_max: usize,
    pub rho: f64,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    /// Samples per class in the balanced test set.
    pub test_per_class: usize,
    /// Standard deviation of the additive pixel noise.
    pub noise: f64,
    pub seed: u64,
}

impl Default for LongTailSpec {
    fn default() -> Self {
        Self {
            classes: 10,
            n_max: 100,
            rho: 100.0,
            channels: 3,
            height: 16,
            width: 16,
            test_per_class: 20,
            noise: 1.0,
            seed: 0,
        }
    }
}

impl LongTailSpec {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::Config(format!(
                "data.classes must be >= 2, got {}",
                self.classes
            )));
        }
        if !(self.rho >= 1.0 && self.rho.is_finite()) {
            return Err(Error::Config(format!(
                "data.rho must be >= 1, got {}",
                self.rho
            )));
        }
        if self.n_max == 0 || self.channels == 0 || self.height == 0 || self.width == 0 {
            return Err(Error::Config("data sizes must be positive".into()));
        }
        if self.test_per_class == 0 {
            return Err(Error::Config("data.test_per_class must be positive".into()));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(Error::Config(format!(
                "data.noise must be >= 0, got {}",
                self.noise
            )));
        }
        Ok(())
    }
}

/// `n_i = round(n_max * rho^(-i / (C - 1)))`, clamped to at least 1.
pub fn class_counts(spec: &LongTailSpec) -> Vec<usize> {
    let c = spec.classes;
    (0..c)
        .map(|i| {
            let e = if c > 1 {
                i as f64 / (c - 1) as f64
            } else {
                0.0
            };
            ((spec.n_max as f64 * spec.rho.powf(-e)).round() as usize).max(1)
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabeledDataset {
    /// `(N, channels, H, W)`.
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub classes: usize,
}

impl LabeledDataset {
    pub fn new(images: Tensor, labels: Vec<usize>, classes: usize) -> Result<Self> {
        if images.rank() != 4 || images.shape()[0] != labels.len() {
            return Err(Error::InvalidShape {
                op: "dataset",
                shape: images.shape().to_vec(),
                reason: format!("expected (N, ch, H, W) with N = {}", labels.len()),
            });
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::LabelOutOfRange {
                label: bad,
                classes,
            });
        }
        if !images.is_finite() {
            return Err(Error::NonFinite("dataset pixels".into()));
        }
        Ok(Self {
            images,
            labels,
            classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_shape(&self) -> [usize; 3] {
        let s = self.images.shape();
        [s[1], s[2], s[3]]
    }

    pub fn per_class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.classes];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }

    /// Images and labels at `idx`, in that order.
    pub fn batch(&self, idx: &[usize]) -> (Tensor, Vec<usize>) {
        (
            self.images.gather_rows(idx),
            idx.iter().map(|&i| self.labels[i]).collect(),
        )
    }

    pub fn subset(&self, idx: &[usize]) -> Self {
        let (images, labels) = self.batch(idx);
        Self {
            images,
            labels,
            classes: self.classes,
        }
    }

    pub fn content_hash(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        crate::tensor::hash_into(&mut h, &self.images);
        for &l in &self.labels {
            h.update((l as u32).to_le_bytes());
        }
        crate::tensor::hex(&h.finalize())
    }
}

/// Per-class pattern parameters: orientation, spatial frequency and channel mix.
struct ClassPattern {
    angle: f64,
    freq: f64,
    mix: Vec<f64>,
}

fn class_patterns(spec: &LongTailSpec, rng: &mut ChaCha8Rng) -> Vec<ClassPattern> {
    let c = spec.classes;
    let n_freq = 2usize;
    let n_angle = c.div_ceil(n_freq);
    (0..c)
        .map(|k| {
            let angle = std::f64::consts::PI * (k % n_angle) as f64 / n_angle as f64;
            let freq = 1.5 + 1.5 * (k / n_angle) as f64;
            let mix = (0..spec.channels)
                .map(|_| rng.random_range(0.5..1.0))
                .collect();
            ClassPattern { angle, freq, mix }
        })
        .collect()
}

fn render(
    spec: &LongTailSpec,
    pattern: &ClassPattern,
    rng: &mut ChaCha8Rng,
    noise: &Normal<f64>,
    out: &mut Vec<f64>,
) {
    let phase = rng.random_range(0.0..std::f64::consts::TAU);
    let (h, w) = (spec.height as f64, spec.width as f64);
    let (ca, sa) = (pattern.angle.cos(), pattern.angle.sin());
    for &m in &pattern.mix {
        for y in 0..spec.height {
            for x in 0..spec.width {
                let t = ca * x as f64 / w + sa * y as f64 / h;
                let v = m * (std::f64::consts::TAU * pattern.freq * t + phase).sin();
                out.push(v + noise.sample(rng));
            }
        }
    }
}

/// Long-tailed train set following [`class_counts`] plus a balanced test set.
///
/// Each class is a sinusoidal grating with its own orientation and frequency;
/// every sample draws a random phase and Gaussian pixel noise, so the class is
/// recoverable from local spatial structure but not from per-pixel means.
pub fn synthesize(spec: &LongTailSpec) -> Result<(LabeledDataset, LabeledDataset)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let patterns = class_patterns(spec, &mut rng);
    let noise = Normal::new(0.0, spec.noise).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let counts = class_counts(spec);
    let shape = |n| vec![n, spec.channels, spec.height, spec.width];

    let mut make = |per_class: &dyn Fn(usize) -> usize| -> Result<LabeledDataset> {
        let mut pixels = Vec::new();
        let mut labels = Vec::new();
        for (k, p) in patterns.iter().enumerate() {
            for _ in 0..per_class(k) {
                render(spec, p, &mut rng, &noise, &mut pixels);
                labels.push(k);
            }
        }
        LabeledDataset::new(
            Tensor::new(shape(labels.len()), pixels)?,
            labels,
            spec.classes,
        )
    };
    let train = make(&|k| counts[k])?;
    let test = make(&|_| spec.test_per_class)?;
    Ok((train, test))
}

/// Output of [`bilevel_split`].
#[derive(Clone, Debug)]
pub struct Split {
    pub w_set: LabeledDataset,
    pub alpha_set: LabeledDataset,
    pub w_indices: Vec<usize>,
    pub alpha_indices: Vec<usize>,
    pub warnings: Vec<String>,
}

/// Stratified per-class split; each class sends `ceil(n * fraction)` samples to
/// the weight set and the rest to the architecture set.
pub fn bilevel_split(train: &LabeledDataset, fraction: f64, seed: u64) -> Result<Split> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "split fraction must be in (0, 1), got {fraction}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut by_class = vec![Vec::new(); train.classes];
    for (i, &l) in train.labels.iter().enumerate() {
        by_class[l].push(i);
    }
    let mut w_idx = Vec::new();
    let mut a_idx = Vec::new();
    let mut warnings = Vec::new();
    for (k, mut idx) in by_class.into_iter().enumerate() {
        idx.shuffle(&mut rng);
        let n = idx.len();
        let n_w = ((n as f64 * fraction).ceil() as usize).min(n);
        if n == 1 {
            warnings.push(format!(
                "class {k} has a single sample; architecture set holds none of it"
            ));
        } else if n > 0 && n_w == n {
            warnings.push(format!("class {k} has no samples in the architecture set"));
        }
        w_idx.extend_from_slice(&idx[..n_w]);
        a_idx.extend_from_slice(&idx[n_w..]);
    }
    for w in &warnings {
        log::warn!("{w}");
    }
    w_idx.sort_unstable();
    a_idx.sort_unstable();
    Ok(Split {
        w_set: train.subset(&w_idx),
        alpha_set: train.subset(&a_idx),
        w_indices: w_idx,
        alpha_indices: a_idx,
        warnings,
    })
}

/// Shuffled mini-batches of `0..n`; the last batch may be short.
pub fn shuffled_batches<R: Rng + ?Sized>(
    n: usize,
    batch_size: usize,
    rng: &mut R,
) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    idx.chunks(batch_size.max(1))
        .map(<[usize]>::to_vec)
        .collect()
}

/// Consecutive mini-batches of `0..n`, in order.
pub fn ordered_batches(n: usize, batch_size: usize) -> Vec<Vec<usize>> {
    (0..n)
        .collect::<Vec<_>>()
        .chunks(batch_size.max(1))
        .map(<[usize]>::to_vec)
        .collect()
}

pub fn write_dataset<W: Write>(ds: &LabeledDataset, mut out: W) -> Result<()> {
    let [ch, h, w] = ds.image_shape();
    out.write_all(&MAGIC)?;
    for v in [
        FORMAT_VERSION,
        ds.classes as u32,
        ds.len() as u32,
        ch as u32,
        h as u32,
        w as u32,
    ] {
        out.write_all(&v.to_le_bytes())?;
    }
    for &l in &ds.labels {
        out.write_all(&(l as u32).to_le_bytes())?;
    }
    for &p in ds.images.data() {
        out.write_all(&p.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_dataset<R: Read>(mut input: R) -> Result<LabeledDataset> {
    let mut magic = [0u8; 4];
    input.read_exact(&mut magic)?;
    if magic != MAGIC {
        return Err(Error::Format("bad dataset magic".into()));
    }
    let mut u32s = [0u32; 6];
    for v in &mut u32s {
        let mut b = [0u8; 4];
        input.read_exact(&mut b)?;
        *v = u32::from_le_bytes(b);
    }
    let [version, classes, n, ch, h, w] = u32s.map(|v| v as usize);
    if version != FORMAT_VERSION as usize {
        return Err(Error::Format(format!(
            "unsupported dataset version {version}"
        )));
    }
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let mut b = [0u8; 4];
        input.read_exact(&mut b)?;
        labels.push(u32::from_le_bytes(b) as usize);
    }
    let count = n * ch * h * w;
    let mut bytes = vec![0u8; count * 8];
    input.read_exact(&mut bytes)?;
    let pixels = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    if input.read(&mut [0u8; 1])? != 0 {
        return Err(Error::Format("trailing bytes after dataset".into()));
    }
    LabeledDataset::new(Tensor::new(vec![n, ch, h, w], pixels)?, labels, classes)
}

pub fn save_dataset(ds: &LabeledDataset, path: &Path) -> Result<()> {
    let f = std::fs::File::create(path)?;
    write_dataset(ds, std::io::BufWriter::new(f))
}

pub fn load_dataset(path: &Path) -> Result<LabeledDataset> {
    let f = std::fs::File::open(path)?;
    read_dataset(std::io::BufReader::new(f))
}

/// Reads CIFAR-style binary records (`1` label byte then `3*32*32` pixel bytes),
/// scaling pixels to `[0, 1]`.
pub fn load_cifar_records(bytes: &[u8], classes: usize) -> Result<LabeledDataset> {
    const REC: usize = 1 + 3 * 32 * 32;
    if bytes.len() % REC != 0 {
        return Err(Error::Format(format!(
            "record file length {} is not a multiple of {REC}",
            bytes.len()
        )));
    }
    let n = bytes.len() / REC;
    let mut labels = Vec::with_capacity(n);
    let mut pixels = Vec::with_capacity(n * (REC - 1));
    for rec in bytes.chunks_exact(REC) {
        labels.push(rec[0] as usize);
        pixels.extend(rec[1..].iter().map(|&b| b as f64 / 255.0));
    }
    LabeledDataset::new(Tensor::new(vec![n, 3, 32, 32], pixels)?, labels, classes)
}

/// Keeps the first `class_counts(spec)[k]` samples of each class `k`.
pub fn subsample_long_tail(ds: &LabeledDataset, spec: &LongTailSpec) -> Result<LabeledDataset> {
    let counts = class_counts(spec);
    if counts.len() != ds.classes {
        return Err(Error::Config(format!(
            "spec has {} classes, data has {}",
            counts.len(),
            ds.classes
        )));
    }
    let mut taken = vec![0; ds.classes];
    let mut idx = Vec::new();
    for (i, &l) in ds.labels.iter().enumerate() {
        if taken[l] < counts[l] {
            taken[l] += 1;
            idx.push(i);
        }
    }
    if let Some(k) = (0..ds.classes).find(|&k| taken[k] < counts[k]) {
        return Err(Error::Config(format!(
            "class {k} has {} samples, profile needs {}",
            taken[k], counts[k]
        )));
    }
    Ok(ds.subset(&idx))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn binary_round_trip() {
        let spec = LongTailSpec {
            classes: 3,
            n_max: 4,
            rho: 4.0,
            height: 4,
            width: 5,
            test_per_class: 1,
            ..Default::default()
        };
        let (train, _) = synthesize(&spec).unwrap();
        let mut buf = Vec::new();
        write_dataset(&train, &mut buf).unwrap();
        assert_eq!(&buf[..4], b"TNDS");
        assert_eq!(buf.len(), 28 + 4 * train.len() + 8 * train.images.len());
        assert_eq!(read_dataset(&buf[..]).unwrap(), train);
        buf.push(0);
        assert!(read_dataset(&buf[..]).is_err());
    }

    #[test]
    fn cifar_records() {
        let mut bytes = vec![0u8; 2 * 3073];
        bytes[0] = 1;
        bytes[1] = 255;
        bytes[3073] = 0;
        let ds = load_cifar_records(&bytes, 10).unwrap();
        assert_eq!(ds.labels, vec![1, 0]);
        assert_eq!(ds.images.data()[0], 1.0);
        assert!(load_cifar_records(&bytes[1..], 10).is_err());
    }
}
