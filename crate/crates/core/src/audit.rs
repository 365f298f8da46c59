//! Finite-difference audit of every tape primitive and every candidate operation.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{grad_check_many, BnMode, ConvAttrs, PoolAttrs, Tape, Var};
use crate::error::Result;
use crate::nn::{Ctx, Mode};
use crate::ops::{build_op, OpKind};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckRow {
    pub target: String,
    pub seed: u64,
    pub max_rel_error: f64,
    pub passed: bool,
}

fn randn(shape: &[usize], std: f64, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::randn(shape.to_vec(), std, rng)
}

/// Contracts the output with fixed random weights into a scalar.
fn project(tape: &Tape, y: Var, seed: u64) -> Result<Var> {
    let w = tape.constant(Tensor::randn(
        tape.shape(y),
        1.0,
        &mut ChaCha8Rng::seed_from_u64(seed ^ 0x5eed),
    ));
    let p = tape.mul(y, w)?;
    tape.sum(p)
}

type Case = (Vec<Tensor>, Box<dyn Fn(&Tape, &[Var]) -> Result<Var>>);

fn primitive_case(name: &str, seed: u64) -> Case {
    let mut r = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(7919).wrapping_add(name.len() as u64));
    let img = |r: &mut ChaCha8Rng| randn(&[2, 4, 5, 5], 1.0, r);
    let vec4 = |r: &mut ChaCha8Rng| randn(&[4], 1.0, r);
    let s = seed;
    match name {
        "conv2d" => (
            vec![img(&mut r), randn(&[6, 2, 3, 3], 0.5, &mut r)],
            Box::new(move |t, v| project(t, t.conv2d(v[0], v[1], ConvAttrs::same(3, 2, 1, 2))?, s)),
        ),
        "matmul" => (
            vec![randn(&[3, 4], 1.0, &mut r), randn(&[4, 5], 1.0, &mut r)],
            Box::new(move |t, v| project(t, t.matmul(v[0], v[1])?, s)),
        ),
        "add" | "sub" | "mul" => {
            let n = name.to_string();
            (
                vec![img(&mut r), img(&mut r)],
                Box::new(move |t, v| {
                    let y = match n.as_str() {
                        "add" => t.add(v[0], v[1])?,
                        "sub" => t.sub(v[0], v[1])?,
                        _ => t.mul(v[0], v[1])?,
                    };
                    project(t, y, s)
                }),
            )
        }
        "scale" => (
            vec![img(&mut r)],
            Box::new(move |t, v| project(t, t.scale(v[0], -1.7)?, s)),
        ),
        "broadcast_add" | "broadcast_mul" => {
            let add = name == "broadcast_add";
            (
                vec![img(&mut r), randn(&[4, 1, 1], 1.0, &mut r)],
                Box::new(move |t, v| {
                    let y = if add {
                        t.broadcast_add(v[0], v[1])?
                    } else {
                        t.broadcast_mul(v[0], v[1])?
                    };
                    project(t, y, s)
                }),
            )
        }
        "concat" => (
            vec![img(&mut r), randn(&[2, 3, 5, 5], 1.0, &mut r)],
            Box::new(move |t, v| project(t, t.concat(&[v[0], v[1]])?, s)),
        ),
        "split" => (
            vec![img(&mut r)],
            Box::new(move |t, v| {
                let parts = t.split(v[0], &[1, 3])?;
                let a = project(t, parts[0], s)?;
                let b = project(t, parts[1], s + 1)?;
                t.add(a, b)
            }),
        ),
        "relu" | "sigmoid" | "gelu" => {
            let n = name.to_string();
            (
                vec![img(&mut r)],
                Box::new(move |t, v| {
                    let y = match n.as_str() {
                        "relu" => t.relu(v[0])?,
                        "sigmoid" => t.sigmoid(v[0])?,
                        _ => t.gelu(v[0])?,
                    };
                    project(t, y, s)
                }),
            )
        }
        "batchnorm" => (
            vec![img(&mut r), vec4(&mut r), vec4(&mut r)],
            Box::new(move |t, v| project(t, t.batch_norm(v[0], v[1], v[2], BnMode::Train)?.0, s)),
        ),
        "batchnorm_eval" => (
            vec![img(&mut r), vec4(&mut r), vec4(&mut r)],
            Box::new(move |t, v| {
                let mode = BnMode::Eval {
                    mean: vec![0.1, -0.2, 0.3, 0.0],
                    var: vec![1.0, 2.0, 0.5, 1.5],
                };
                project(t, t.batch_norm(v[0], v[1], v[2], mode)?.0, s)
            }),
        ),
        "groupnorm" => (
            vec![img(&mut r), vec4(&mut r), vec4(&mut r)],
            Box::new(move |t, v| project(t, t.group_norm(v[0], v[1], v[2], 2)?, s)),
        ),
        "max_pool" | "avg_pool" => {
            let max = name == "max_pool";
            let p = PoolAttrs {
                kernel: 3,
                stride: 2,
                padding: 1,
            };
            (
                vec![img(&mut r)],
                Box::new(move |t, v| {
                    let y = if max {
                        t.max_pool(v[0], p)?
                    } else {
                        t.avg_pool(v[0], p)?
                    };
                    project(t, y, s)
                }),
            )
        }
        "global_avg_pool" => (
            vec![img(&mut r)],
            Box::new(move |t, v| project(t, t.global_avg_pool(v[0])?, s)),
        ),
        "softmax" => (
            vec![randn(&[3, 5], 2.0, &mut r)],
            Box::new(move |t, v| project(t, t.softmax(v[0], 1)?, s)),
        ),
        "log_softmax" => (
            vec![randn(&[3, 5], 2.0, &mut r)],
            Box::new(move |t, v| project(t, t.log_softmax(v[0], 1)?, s)),
        ),
        "reshape" => (
            vec![img(&mut r)],
            Box::new(move |t, v| project(t, t.reshape(v[0], vec![2, 100])?, s)),
        ),
        "sum" => (
            vec![img(&mut r)],
            Box::new(move |t, v| {
                let sq = t.mul(v[0], v[0])?;
                t.sum(sq)
            }),
        ),
        "mean" => (
            vec![img(&mut r)],
            Box::new(move |t, v| {
                let sq = t.mul(v[0], v[0])?;
                t.mean(sq)
            }),
        ),
        "weighted_sum" => (
            vec![randn(&[2, 3], 1.0, &mut r), img(&mut r), img(&mut r)],
            Box::new(move |t, v| project(t, t.weighted_sum(v[0], 1, &[(0, v[1]), (2, v[2])])?, s)),
        ),
        "nll" => (
            vec![randn(&[4, 5], 2.0, &mut r)],
            Box::new(move |t, v| {
                let lp = t.log_softmax(v[0], 1)?;
                t.nll(lp, &[0, 3, 4, 3], &[1.0, 0.5, 2.0, 1.0])
            }),
        ),
        other => unreachable!("no audit case for {other}"),
    }
}

/// Every primitive the tape records; batch norm appears in both modes.
pub const PRIMITIVES: &[&str] = &[
    "conv2d",
    "matmul",
    "add",
    "sub",
    "scale",
    "mul",
    "broadcast_add",
    "broadcast_mul",
    "concat",
    "split",
    "relu",
    "sigmoid",
    "gelu",
    "batchnorm",
    "batchnorm_eval",
    "groupnorm",
    "max_pool",
    "avg_pool",
    "global_avg_pool",
    "softmax",
    "log_softmax",
    "reshape",
    "sum",
    "mean",
    "weighted_sum",
    "nll",
];

pub fn primitive_checks(seeds: &[u64], tol: f64) -> Result<Vec<CheckRow>> {
    let mut rows = Vec::new();
    for &name in PRIMITIVES {
        for &seed in seeds {
            let (points, f) = primitive_case(name, seed);
            let report = grad_check_many(|t, v| f(t, v), &points, 1e-5)?;
            rows.push(CheckRow {
                target: name.to_string(),
                seed,
                max_rel_error: report.max_rel_error,
                passed: report.passes(tol),
            });
        }
    }
    Ok(rows)
}

/// Checks each operation with respect to its input and all of its parameters,
/// at stride 1 and 2, in train mode with frozen running statistics.
/// The zero operation has no gradient to check and is reported as exact.
pub fn op_checks(seeds: &[u64], tol: f64) -> Result<Vec<CheckRow>> {
    let mut rows = Vec::new();
    for kind in OpKind::ALL {
        for &seed in seeds {
            let mut worst = 0.0f64;
            if kind != OpKind::Zero {
                for stride in [1, 2] {
                    let op = build_op(kind, 4, 4, stride, seed)?;
                    let x = Tensor::randn(
                        vec![2, 4, 5, 5],
                        1.0,
                        &mut ChaCha8Rng::seed_from_u64(seed + 100),
                    );
                    let mut points = vec![x];
                    points.extend(op.params.params().iter().map(|p| p.value.clone()));
                    let f = |tape: &Tape, v: &[Var]| {
                        let mut store = op.params.clone();
                        let mut cx =
                            Ctx::new(tape, &v[1..], &mut store, Mode::Train).frozen_stats();
                        let y = op.op.forward(&mut cx, v[0])?;
                        project(tape, y, seed)
                    };
                    worst = worst.max(grad_check_many(f, &points, 1e-5)?.max_rel_error);
                }
            }
            rows.push(CheckRow {
                target: kind.tag().to_string(),
                seed,
                max_rel_error: worst,
                passed: worst < tol,
            });
        }
    }
    Ok(rows)
}

pub fn rows_to_csv(rows: &[CheckRow]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    let bytes = w
        .into_inner()
        .map_err(|e| crate::Error::Format(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| crate::Error::Format(e.to_string()))
}
