//! WebAssembly bindings for the static demo page in `www/`.
//!
//! Every export returns a JSON string; failures come back as `{"error": "..."}`.

use serde::Serialize;
use wasm_bindgen::prelude::*;

use tailnas::data::{class_counts, LongTailSpec};
use tailnas::etf::{build_etf, column_norms, pairwise_cosines, verify_etf};
use tailnas::search::{hessian_lambda_max, HessianProbe};

fn to_json<T: Serialize>(r: tailnas::Result<T>) -> String {
    match r {
        Ok(v) => serde_json::to_string(&v).unwrap_or_else(|e| error_json(&e.to_string())),
        Err(e) => error_json(&e.to_string()),
    }
}

fn error_json(msg: &str) -> String {
    serde_json::json!({ "error": msg }).to_string()
}

#[derive(Serialize)]
struct Geometry {
    classes: usize,
    dim: usize,
    norms: Vec<f64>,
    cosines: Vec<f64>,
    angle_degrees: f64,
    passed: bool,
    /// First two coordinates of every class vector, for plotting.
    plane: Vec<[f64; 2]>,
}

/// Builds a fixed classifier and reports its column norms, pairwise cosines
/// and a 2-D projection of the class vectors.
#[wasm_bindgen]
pub fn etf_geometry(classes: usize, dim: usize, energy: f64, seed: u32) -> String {
    to_json(build_etf(dim, classes, energy, seed as u64).map(|e| {
        let report = verify_etf(&e, 1e-10);
        // project onto the span of the first two centered basis directions
        let w = e.w.data();
        let c = classes;
        let basis: Vec<Vec<f64>> = (0..2.min(c))
            .map(|j| {
                let col: Vec<f64> = (0..dim).map(|r| w[r * c + j]).collect();
                let n = col.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
                col.into_iter().map(|x| x / n).collect()
            })
            .collect();
        let b1 = {
            let mut v: Vec<f64> = basis[1].clone();
            let dot: f64 = v.iter().zip(&basis[0]).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(&basis[0]).for_each(|(a, b)| *a -= dot * b);
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
            v.into_iter().map(|x| x / n).collect::<Vec<_>>()
        };
        let plane = (0..c)
            .map(|j| {
                let x: f64 = (0..dim).map(|r| w[r * c + j] * basis[0][r]).sum();
                let y: f64 = (0..dim).map(|r| w[r * c + j] * b1[r]).sum();
                [x, y]
            })
            .collect();
        Geometry {
            classes,
            dim,
            norms: column_norms(&e.w),
            cosines: pairwise_cosines(&e.w),
            angle_degrees: e.nominal_angle_degrees(),
            passed: report.passed,
            plane,
        }
    }))
}

#[derive(Serialize)]
struct Profile {
    counts: Vec<usize>,
    realized_ratio: f64,
}

/// Per-class training counts of a long-tailed profile.
#[wasm_bindgen]
pub fn long_tail_profile(classes: usize, n_max: usize, rho: f64) -> String {
    let spec = LongTailSpec {
        classes,
        n_max,
        rho,
        ..LongTailSpec::default()
    };
    to_json(spec.validate().map(|_| {
        let counts = class_counts(&spec);
        let realized_ratio =
            *counts.iter().max().unwrap() as f64 / *counts.iter().min().unwrap() as f64;
        Profile {
            counts,
            realized_ratio,
        }
    }))
}

#[derive(Serialize)]
struct Curvature {
    eigenvalue: f64,
    residual: f64,
    iterations: usize,
    converged: bool,
}

/// Dominant curvature of the quadratic `x' A x / 2` by finite-difference power
/// iteration. `matrix` is row-major `n x n` and is symmetrized first.
#[wasm_bindgen]
pub fn power_iteration(matrix: Vec<f64>, n: usize, iters: usize) -> String {
    if n == 0 || matrix.len() != n * n {
        return error_json(&format!(
            "expected {} entries for a {n}x{n} matrix, got {}",
            n * n,
            matrix.len()
        ));
    }
    let a: Vec<f64> = (0..n * n)
        .map(|k| 0.5 * (matrix[k] + matrix[(k % n) * n + k / n]))
        .collect();
    let probe = HessianProbe {
        power_iters: iters.max(1),
        tol: 1e-10,
        ..HessianProbe::default()
    };
    let grad = |x: &[f64]| {
        Ok((0..n)
            .map(|i| (0..n).map(|j| a[i * n + j] * x[j]).sum())
            .collect())
    };
    to_json(
        hessian_lambda_max(&probe, grad, &vec![0.0; n]).map(|r| Curvature {
            eigenvalue: r.eigenvalue,
            residual: r.residual,
            iterations: r.iterations,
            converged: r.converged,
        }),
    )
}
