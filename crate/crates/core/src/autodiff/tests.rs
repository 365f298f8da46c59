use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Contracts an arbitrary-shape output with fixed random weights so every
/// coordinate of the gradient is generically nonzero.
fn project(tape: &Tape, y: Var, seed: u64) -> Result<Var> {
    let shape = tape.shape(y);
    let w = tape.constant(Tensor::randn(shape, 1.0, &mut rng(seed ^ 0xabc)));
    let p = tape.mul(y, w)?;
    tape.sum(p)
}

fn check(points: Vec<Tensor>, f: impl Fn(&Tape, &[Var]) -> Result<Var>) -> f64 {
    grad_check_many(f, &points, 1e-4).unwrap().max_rel_error
}

const TOL: f64 = 1e-4;

#[test]
fn square_gradient() {
    let tape = Tape::new();
    let x = tape.param(Tensor::from_vec(vec![3.0]));
    let y = tape.mul(x, x).unwrap();
    let s = tape.sum(y).unwrap();
    let g = tape.backward(s).unwrap();
    assert_eq!(g.get(x).unwrap().data(), &[6.0]);
    assert!(tape.is_empty());
}

#[test]
fn relu_subgradient() {
    let tape = Tape::new();
    let x = tape.param(Tensor::from_vec(vec![-1.0, 2.0, 0.0]));
    let y = tape.relu(x).unwrap();
    let s = tape.sum(y).unwrap();
    let g = tape.backward(s).unwrap();
    assert_eq!(g.get(x).unwrap().data(), &[0.0, 1.0, 0.0]);
}

#[test]
fn shape_contracts() {
    let tape = Tape::new();
    let a = tape.constant(Tensor::zeros(vec![2, 3]));
    let b = tape.constant(Tensor::zeros(vec![3, 4]));
    assert_eq!(tape.shape(tape.matmul(a, b).unwrap()), vec![2, 4]);
    assert!(matches!(
        tape.matmul(b, a),
        Err(Error::ShapeMismatch { .. })
    ));

    let x = tape.constant(Tensor::zeros(vec![1, 4, 8, 8]));
    let k = tape.constant(Tensor::zeros(vec![4, 4, 3, 3]));
    let y = tape.conv2d(x, k, ConvAttrs::same(3, 1, 1, 1)).unwrap();
    assert_eq!(tape.shape(y), vec![1, 4, 8, 8]);

    let x = tape.constant(Tensor::zeros(vec![1, 8, 8, 8]));
    let k4 = tape.constant(Tensor::zeros(vec![8, 2, 3, 3]));
    let y = tape.conv2d(x, k4, ConvAttrs::same(3, 1, 1, 4)).unwrap();
    assert_eq!(tape.shape(y), vec![1, 8, 8, 8]);
    let k3 = tape.constant(Tensor::zeros(vec![8, 2, 3, 3]));
    let err = tape.conv2d(x, k3, ConvAttrs::same(3, 1, 1, 3)).unwrap_err();
    assert!(err.to_string().contains("groups=3"), "{err}");
}

#[test]
fn unknown_primitive_name() {
    let err = Primitive::from_name("conv3d", &Attrs::new()).unwrap_err();
    assert!(matches!(err, Error::UnknownPrimitive(_)));
    for name in Primitive::NAMES {
        let mut attrs = Attrs::new();
        for k in ["axis", "groups", "start", "len", "factor"] {
            attrs.insert(k.into(), 1.0);
        }
        assert_eq!(Primitive::from_name(name, &attrs).unwrap().name(), *name);
    }
}

#[test]
fn non_scalar_loss_rejected() {
    let tape = Tape::new();
    let x = tape.param(Tensor::zeros(vec![2]));
    let y = tape.relu(x).unwrap();
    assert!(matches!(tape.backward(y), Err(Error::NonScalarLoss(_))));
}

#[test]
fn non_finite_values_are_errors() {
    let tape = Tape::new();
    let x = tape.param(Tensor::from_vec(vec![f64::MAX]));
    assert!(matches!(tape.scale(x, 10.0), Err(Error::NonFinite(_))));
}

#[test]
fn conv2d_matches_finite_differences() {
    let mut r = rng(7);
    let x = Tensor::randn(vec![1, 2, 5, 5], 1.0, &mut r);
    let k = Tensor::randn(vec![3, 2, 3, 3], 0.5, &mut r);
    let err = check(vec![x, k], |t, v| {
        let y = t.conv2d(v[0], v[1], ConvAttrs::same(3, 1, 1, 1))?;
        project(t, y, 1)
    });
    assert!(err < TOL, "{err}");
}

#[test]
fn conv2d_variants_match_finite_differences() {
    // (kernel, stride, dilation, groups, c_in, c_out)
    let cases = [
        (3, 2, 1, 1, 2, 4),
        (3, 1, 2, 1, 2, 2),
        (5, 2, 2, 4, 4, 4),
        (3, 1, 1, 2, 4, 6),
        (1, 1, 1, 1, 3, 5),
        (1, 2, 1, 1, 3, 5),
    ];
    for (i, &(k, s, d, g, ci, co)) in cases.iter().enumerate() {
        for seed in 0..3 {
            let mut r = rng(100 + seed);
            let x = Tensor::randn(vec![2, ci, 6, 6], 1.0, &mut r);
            let w = Tensor::randn(vec![co, ci / g, k, k], 0.5, &mut r);
            let err = check(vec![x, w], |t, v| {
                let y = t.conv2d(v[0], v[1], ConvAttrs::same(k, s, d, g))?;
                project(t, y, seed)
            });
            assert!(err < TOL, "case {i} seed {seed}: {err}");
        }
    }
}

#[test]
fn elementwise_and_broadcast_primitives() {
    for seed in 0..3 {
        let mut r = rng(seed);
        let a = Tensor::randn(vec![2, 3, 2, 2], 1.0, &mut r);
        let b = Tensor::randn(vec![2, 3, 2, 2], 1.0, &mut r);
        let c = Tensor::randn(vec![3, 1, 1], 1.0, &mut r);
        let s = Tensor::randn(vec![1], 1.0, &mut r);
        type Case = Box<dyn Fn(&Tape, &[Var]) -> Result<Var>>;
        let cases: Vec<(&str, Vec<Tensor>, Case)> = vec![
            (
                "add",
                vec![a.clone(), b.clone()],
                Box::new(|t, v| t.add(v[0], v[1])),
            ),
            (
                "sub",
                vec![a.clone(), b.clone()],
                Box::new(|t, v| t.sub(v[0], v[1])),
            ),
            (
                "mul",
                vec![a.clone(), b.clone()],
                Box::new(|t, v| t.mul(v[0], v[1])),
            ),
            (
                "scale",
                vec![a.clone()],
                Box::new(|t, v| t.scale(v[0], -2.5)),
            ),
            (
                "broadcast_add",
                vec![a.clone(), c.clone()],
                Box::new(|t, v| t.broadcast_add(v[0], v[1])),
            ),
            (
                "broadcast_mul",
                vec![a.clone(), c.clone()],
                Box::new(|t, v| t.broadcast_mul(v[0], v[1])),
            ),
            (
                "scalar_mul",
                vec![a.clone(), s.clone()],
                Box::new(|t, v| t.broadcast_mul(v[0], v[1])),
            ),
            ("relu", vec![a.clone()], Box::new(|t, v| t.relu(v[0]))),
            ("sigmoid", vec![a.clone()], Box::new(|t, v| t.sigmoid(v[0]))),
            ("gelu", vec![a.clone()], Box::new(|t, v| t.gelu(v[0]))),
            (
                "concat",
                vec![a.clone(), b.clone()],
                Box::new(|t, v| t.concat(&[v[0], v[1]])),
            ),
            (
                "split",
                vec![a.clone()],
                Box::new(|t, v| {
                    let parts = t.split(v[0], &[1, 2])?;
                    let q = t.scale(parts[0], 3.0)?;
                    t.concat(&[parts[1], q])
                }),
            ),
            (
                "max_pool",
                vec![a.clone()],
                Box::new(|t, v| t.max_pool(v[0], PoolAttrs::same3(1))),
            ),
            (
                "max_pool_s2",
                vec![a.clone()],
                Box::new(|t, v| t.max_pool(v[0], PoolAttrs::same3(2))),
            ),
            (
                "avg_pool",
                vec![a.clone()],
                Box::new(|t, v| t.avg_pool(v[0], PoolAttrs::same3(1))),
            ),
            (
                "avg_pool_s2",
                vec![a.clone()],
                Box::new(|t, v| t.avg_pool(v[0], PoolAttrs::same3(2))),
            ),
            (
                "global_avg_pool",
                vec![a.clone()],
                Box::new(|t, v| t.global_avg_pool(v[0])),
            ),
            (
                "softmax_c",
                vec![a.clone()],
                Box::new(|t, v| t.softmax(v[0], 1)),
            ),
            (
                "softmax_last",
                vec![a.clone()],
                Box::new(|t, v| t.softmax(v[0], 3)),
            ),
            (
                "log_softmax",
                vec![a.clone()],
                Box::new(|t, v| t.log_softmax(v[0], 1)),
            ),
            (
                "reshape",
                vec![a.clone()],
                Box::new(|t, v| t.reshape(v[0], vec![6, 4])),
            ),
            ("mean", vec![a.clone()], Box::new(|t, v| t.mean(v[0]))),
        ];
        for (name, points, f) in cases {
            let err = check(points, |t, v| {
                let y = f(t, v)?;
                project(t, y, seed + 11)
            });
            assert!(err < TOL, "{name} seed {seed}: {err}");
        }
    }
}

#[test]
fn matmul_and_losses_match_finite_differences() {
    for seed in 0..3 {
        let mut r = rng(seed + 40);
        let a = Tensor::randn(vec![3, 4], 1.0, &mut r);
        let b = Tensor::randn(vec![4, 5], 1.0, &mut r);
        let err = check(vec![a, b], |t, v| {
            let y = t.matmul(v[0], v[1])?;
            project(t, y, seed)
        });
        assert!(err < TOL, "matmul {err}");

        let logits = Tensor::randn(vec![4, 5], 2.0, &mut r);
        let err = check(vec![logits], |t, v| {
            let lp = t.log_softmax(v[0], 1)?;
            t.nll(lp, &[0, 3, 4, 3], &[1.0, 0.5, 2.0, 1.0])
        });
        assert!(err < TOL, "nll {err}");
    }
}

#[test]
fn normalization_primitives_match_finite_differences() {
    for seed in 0..3 {
        let mut r = rng(seed + 70);
        let x = Tensor::randn(vec![3, 4, 3, 3], 1.5, &mut r);
        let g = Tensor::randn(vec![4], 1.0, &mut r);
        let b = Tensor::randn(vec![4], 1.0, &mut r);
        let err = check(vec![x.clone(), g.clone(), b.clone()], |t, v| {
            let (y, _) = t.batch_norm(v[0], v[1], v[2], BnMode::Train)?;
            project(t, y, seed)
        });
        assert!(err < TOL, "bn train {err}");
        let mode = BnMode::Eval {
            mean: vec![0.1, -0.2, 0.3, 0.0],
            var: vec![1.0, 2.0, 0.5, 1.5],
        };
        let err = check(vec![x.clone(), g.clone(), b.clone()], |t, v| {
            let (y, _) = t.batch_norm(v[0], v[1], v[2], mode.clone())?;
            project(t, y, seed)
        });
        assert!(err < TOL, "bn eval {err}");
        for groups in [1, 2] {
            let err = check(vec![x.clone(), g.clone(), b.clone()], |t, v| {
                let y = t.group_norm(v[0], v[1], v[2], groups)?;
                project(t, y, seed)
            });
            assert!(err < TOL, "group norm {groups}: {err}");
        }
    }
}

#[test]
fn weighted_sum_matches_finite_differences() {
    let mut r = rng(5);
    let w = Tensor::randn(vec![2, 3], 1.0, &mut r);
    let y1 = Tensor::randn(vec![2, 2, 3, 3], 1.0, &mut r);
    let y2 = Tensor::randn(vec![2, 2, 3, 3], 1.0, &mut r);
    let err = check(vec![w, y1, y2], |t, v| {
        let sm = t.softmax(v[0], 1)?;
        let y = t.weighted_sum(sm, 1, &[(0, v[1]), (2, v[2])])?;
        project(t, y, 3)
    });
    assert!(err < TOL, "{err}");
}

#[test]
fn batchnorm_relu_conv_chain() {
    let mut r = rng(21);
    let x = Tensor::randn(vec![2, 3, 5, 5], 1.0, &mut r);
    let g = Tensor::full(vec![3], 1.0);
    let b = Tensor::zeros(vec![3]);
    let k = Tensor::randn(vec![4, 3, 3, 3], 0.4, &mut r);
    let err = check(vec![x, g, b, k], |t, v| {
        let (y, _) = t.batch_norm(v[0], v[1], v[2], BnMode::Train)?;
        let y = t.relu(y)?;
        let y = t.conv2d(y, v[3], ConvAttrs::same(3, 1, 1, 1))?;
        project(t, y, 9)
    });
    assert!(err < TOL, "{err}");
}

#[test]
fn linear_function_is_exact() {
    let x = Tensor::randn(vec![4, 3], 1.0, &mut rng(1));
    let report = grad_check(|t, v| t.scale(t.sum(v)?, 2.0), &x, 1e-4).unwrap();
    assert!(report.max_rel_error < 1e-9, "{}", report.max_rel_error);
}

#[test]
fn nondeterministic_function_fails_check() {
    let counter = std::cell::Cell::new(0.0);
    let x = Tensor::from_vec(vec![1.0, 2.0]);
    let res = grad_check(
        |t, v| {
            counter.set(counter.get() + 1.0);
            let s = t.sum(v)?;
            t.scale(s, counter.get())
        },
        &x,
        1e-4,
    );
    assert!(matches!(res, Err(Error::GradCheck(_))));
}

#[test]
fn softmax_is_a_distribution() {
    let tape = Tape::new();
    let x = tape.constant(Tensor::randn(vec![3, 7, 2], 4.0, &mut rng(3)));
    let y = tape.softmax(x, 1).unwrap();
    let v = tape.value(y);
    for o in 0..3 {
        for i in 0..2 {
            let s: f64 = (0..7).map(|k| v.data()[(o * 7 + k) * 2 + i]).sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }
    assert!(v.data().iter().all(|&p| p >= 0.0));
}

#[test]
fn batchnorm_train_standardizes_channels() {
    let tape = Tape::new();
    // Input variance is large so the eps bias (eps / var) is far below 1e-6.
    let x = tape.constant(Tensor::randn(vec![4, 3, 5, 5], 10.0, &mut rng(4)));
    let g = tape.constant(Tensor::full(vec![3], 1.0));
    let b = tape.constant(Tensor::zeros(vec![3]));
    let (y, stats) = tape.batch_norm(x, g, b, BnMode::Train).unwrap();
    assert_eq!(stats.unwrap().count, 100);
    let v = tape.value(y);
    let (mean, var) = kernels::channel_moments(v.shape(), v.data());
    for c in 0..3 {
        assert!(mean[c].abs() < 1e-6);
        assert!((var[c] - 1.0).abs() < 1e-6, "{}", var[c]);
    }
}

#[test]
fn concat_split_roundtrip_is_bit_exact() {
    let tape = Tape::new();
    let x = tape.constant(Tensor::randn(vec![2, 5, 3, 3], 1.0, &mut rng(8)));
    let parts = tape.split(x, &[2, 1, 2]).unwrap();
    let y = tape.concat(&parts).unwrap();
    assert_eq!(*tape.value(x), *tape.value(y));
}

#[test]
fn repeated_runs_give_identical_gradients() {
    let run = || {
        let mut r = rng(12);
        let tape = Tape::new();
        let x = tape.param(Tensor::randn(vec![2, 3, 6, 6], 1.0, &mut r));
        let k = tape.param(Tensor::randn(vec![3, 1, 3, 3], 1.0, &mut r));
        let g = tape.param(Tensor::full(vec![3], 1.0));
        let b = tape.param(Tensor::zeros(vec![3]));
        let y = tape.conv2d(x, k, ConvAttrs::same(3, 2, 1, 3)).unwrap();
        let (y, _) = tape.batch_norm(y, g, b, BnMode::Train).unwrap();
        let y = tape.relu(y).unwrap();
        let y = tape.global_avg_pool(y).unwrap();
        let l = tape.log_softmax(y, 1).unwrap();
        let loss = tape.nll(l, &[0, 2], &[1.0, 1.0]).unwrap();
        let grads = tape.backward(loss).unwrap();
        [x, k, g, b].map(|v| grads.get(v).unwrap().clone())
    };
    assert_eq!(run(), run());
}

mod props {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn split_then_concat_is_identity(
            n in 1usize..3, widths in proptest::collection::vec(1usize..4, 1..4), hw in 1usize..4, seed in 0u64..1000,
        ) {
            let c: usize = widths.iter().sum();
            let tape = Tape::new();
            let x = tape.constant(Tensor::randn(vec![n, c, hw, hw], 1.0, &mut rng(seed)));
            let parts = tape.split(x, &widths).unwrap();
            let y = tape.concat(&parts).unwrap();
            prop_assert_eq!(&*tape.value(x), &*tape.value(y));
        }

        #[test]
        fn softmax_rows_sum_to_one(len in 1usize..12, scale in 0.1f64..50.0, seed in 0u64..1000) {
            let tape = Tape::new();
            let x = tape.constant(Tensor::randn(vec![2, len], scale, &mut rng(seed)));
            let y = tape.softmax(x, 1).unwrap();
            let v = tape.value(y);
            for row in v.data().chunks(len) {
                prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                prop_assert!(row.iter().all(|&p| p >= 0.0));
            }
        }
    }
}
