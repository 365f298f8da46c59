//! Fixed equiangular tight frame classifier.
//!
//! `W = sqrt(E_W * C / (C - 1)) * U * (I - 11^T / C)` with `U` (d x C) having
//! orthonormal columns. Every column of `W` has norm `sqrt(E_W)` and every
//! pair of columns has cosine `-1 / (C - 1)`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EtfWeights {
    pub d: usize,
    pub classes: usize,
    pub energy: f64,
    pub seed: u64,
    /// Orthonormal basis, `(d, C)`.
    pub u: Tensor,
    /// Classifier weights, `(d, C)`.
    pub w: Tensor,
}

/// Orthonormalizes the columns of a row-major `(rows, cols)` matrix in place
/// (modified Gram-Schmidt, two passes). Diagonal of the implied `R` is positive.
fn orthonormalize_columns(m: &mut [f64], rows: usize, cols: usize) -> Result<()> {
    for j in 0..cols {
        for _pass in 0..2 {
            for k in 0..j {
                let dot: f64 = (0..rows).map(|r| m[r * cols + j] * m[r * cols + k]).sum();
                for r in 0..rows {
                    m[r * cols + j] -= dot * m[r * cols + k];
                }
            }
        }
        let norm = (0..rows)
            .map(|r| m[r * cols + j].powi(2))
            .sum::<f64>()
            .sqrt();
        if norm < 1e-12 {
            return Err(Error::Dimension("random basis is rank deficient".into()));
        }
        for r in 0..rows {
            m[r * cols + j] /= norm;
        }
    }
    Ok(())
}

pub fn build_etf(d: usize, classes: usize, energy: f64, seed: u64) -> Result<EtfWeights> {
    if classes < 2 {
        return Err(Error::InvalidArgument(format!(
            "ETF needs at least 2 classes, got {classes}"
        )));
    }
    if d < classes {
        return Err(Error::Dimension(format!(
            "feature dimension {d} is below class count {classes}; widen the network"
        )));
    }
    if !(energy > 0.0 && energy.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "E_W must be positive, got {energy}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut u = Tensor::randn(vec![d, classes], 1.0, &mut rng).into_data();
    orthonormalize_columns(&mut u, d, classes)?;

    let c = classes as f64;
    let scale = (energy * c / (c - 1.0)).sqrt();
    let mut w = vec![0.0; d * classes];
    for r in 0..d {
        let row = &u[r * classes..(r + 1) * classes];
        let mean = row.iter().sum::<f64>() / c;
        for j in 0..classes {
            w[r * classes + j] = scale * (row[j] - mean);
        }
    }
    Ok(EtfWeights {
        d,
        classes,
        energy,
        seed,
        u: Tensor::new(vec![d, classes], u)?,
        w: Tensor::new(vec![d, classes], w)?,
    })
}

impl EtfWeights {
    /// Pairwise angle between any two columns, in degrees.
    pub fn nominal_angle_degrees(&self) -> f64 {
        (-1.0 / (self.classes as f64 - 1.0)).acos().to_degrees()
    }

    /// Logits on a tape. `W` enters as a constant so no gradient reaches it.
    pub fn logits_on(&self, tape: &Tape, features: Var) -> Result<Var> {
        let shape = tape.shape(features);
        if shape.len() != 2 || shape[1] != self.d {
            return Err(Error::ShapeMismatch {
                op: "etf_logits",
                lhs: shape,
                rhs: vec![self.d, self.classes],
            });
        }
        let w = tape.constant(self.w.clone());
        tape.matmul(features, w)
    }
}

/// `features (N, d) . W (d, C)`.
pub fn etf_logits(etf: &EtfWeights, features: &Tensor) -> Result<Tensor> {
    let tape = Tape::new();
    let f = tape.constant(features.clone());
    let y = etf.logits_on(&tape, f)?;
    let out = tape.value(y).clone();
    Ok(out)
}

/// Norms of each column of a `(d, C)` matrix.
pub fn column_norms(w: &Tensor) -> Vec<f64> {
    let (d, c) = (w.shape()[0], w.shape()[1]);
    (0..c)
        .map(|j| {
            (0..d)
                .map(|r| w.data()[r * c + j].powi(2))
                .sum::<f64>()
                .sqrt()
        })
        .collect()
}

/// Cosine of every column pair `(i < j)` of a `(d, C)` matrix.
pub fn pairwise_cosines(w: &Tensor) -> Vec<f64> {
    let (d, c) = (w.shape()[0], w.shape()[1]);
    let norms = column_norms(w);
    let mut out = Vec::with_capacity(c * (c - 1) / 2);
    for i in 0..c {
        for j in i + 1..c {
            let dot: f64 = (0..d)
                .map(|r| w.data()[r * c + i] * w.data()[r * c + j])
                .sum();
            out.push(dot / (norms[i] * norms[j]).max(f64::MIN_POSITIVE));
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EtfReport {
    pub classes: usize,
    pub d: usize,
    pub energy: f64,
    pub tol: f64,
    pub max_norm_deviation: f64,
    pub max_cosine_deviation: f64,
    pub max_column_sum: f64,
    pub mean_angle_degrees: f64,
    pub norm_ok: bool,
    pub cosine_ok: bool,
    pub column_sum_ok: bool,
    pub passed: bool,
}

/// Checks equal norms, equal pairwise cosines and zero column sum on `w`.
pub fn verify_etf_matrix(w: &Tensor, energy: f64, tol: f64) -> EtfReport {
    let (d, c) = (w.shape()[0], w.shape()[1]);
    let target_norm = energy.sqrt();
    let max_norm_deviation = column_norms(w)
        .iter()
        .map(|n| (n - target_norm).abs())
        .fold(0.0, f64::max);
    let cosines = pairwise_cosines(w);
    let target_cos = -1.0 / (c as f64 - 1.0);
    let max_cosine_deviation = cosines
        .iter()
        .map(|x| (x - target_cos).abs())
        .fold(0.0, f64::max);
    let mean_angle_degrees = cosines
        .iter()
        .map(|x| x.clamp(-1.0, 1.0).acos().to_degrees())
        .sum::<f64>()
        / cosines.len().max(1) as f64;
    let max_column_sum = (0..d)
        .map(|r| w.data()[r * c..(r + 1) * c].iter().sum::<f64>().abs())
        .fold(0.0, f64::max);
    let norm_ok = max_norm_deviation <= tol;
    let cosine_ok = max_cosine_deviation <= tol;
    let column_sum_ok = max_column_sum <= tol;
    EtfReport {
        classes: c,
        d,
        energy,
        tol,
        max_norm_deviation,
        max_cosine_deviation,
        max_column_sum,
        mean_angle_degrees,
        norm_ok,
        cosine_ok,
        column_sum_ok,
        passed: norm_ok && cosine_ok && column_sum_ok,
    }
}

pub fn verify_etf(etf: &EtfWeights, tol: f64) -> EtfReport {
    verify_etf_matrix(&etf.w, etf.energy, tol)
}
