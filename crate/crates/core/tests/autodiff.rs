use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tailnas::autodiff::{grad_check, ConvAttrs, Tape};
use tailnas::tensor::Tensor;

fn randn(shape: &[usize], seed: u64) -> Tensor {
    Tensor::randn(shape.to_vec(), 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

#[test]
fn shape_algebra() {
    let tape = Tape::new();
    let a = tape.constant(randn(&[2, 3], 0));
    let b = tape.constant(randn(&[3, 4], 1));
    assert_eq!(tape.shape(tape.matmul(a, b).unwrap()), [2, 4]);

    let x = tape.constant(randn(&[1, 4, 8, 8], 2));
    let k = tape.constant(randn(&[4, 4, 3, 3], 3));
    assert_eq!(
        tape.shape(tape.conv2d(x, k, ConvAttrs::same(3, 1, 1, 1)).unwrap()),
        [1, 4, 8, 8]
    );

    let x = tape.constant(randn(&[1, 8, 8, 8], 4));
    let grouped = tape.constant(randn(&[8, 2, 3, 3], 5));
    assert!(tape.conv2d(x, grouped, ConvAttrs::same(3, 1, 1, 4)).is_ok());
    let bad = tape.constant(randn(&[9, 3, 3, 3], 6));
    assert!(tape.conv2d(x, bad, ConvAttrs::same(3, 1, 1, 3)).is_err());
}

#[test]
fn hand_derived_gradients() {
    let tape = Tape::new();
    let x = tape.param(Tensor::from_vec(vec![3.0]));
    let sq = tape.mul(x, x).unwrap();
    let loss = tape.sum(sq).unwrap();
    assert_eq!(tape.backward(loss).unwrap().get(x).unwrap().data(), [6.0]);

    let tape = Tape::new();
    let x = tape.param(Tensor::from_vec(vec![-1.0, 2.0]));
    let r = tape.relu(x).unwrap();
    let loss = tape.sum(r).unwrap();
    assert_eq!(
        tape.backward(loss).unwrap().get(x).unwrap().data(),
        [0.0, 1.0]
    );
}

#[test]
fn conv_gradient_against_differences() {
    let kernel = randn(&[3, 2, 3, 3], 7);
    let f = |t: &Tape, x| {
        let k = t.constant(kernel.clone());
        let y = t.conv2d(x, k, ConvAttrs::same(3, 1, 1, 1))?;
        let y2 = t.mul(y, y)?;
        t.sum(y2)
    };
    let r = grad_check(f, &randn(&[1, 2, 5, 5], 8), 1e-4).unwrap();
    assert!(r.passes(1e-4), "{}", r.max_rel_error);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]
    #[test]
    fn matmul_matches_naive(m in 1usize..6, k in 1usize..6, n in 1usize..6, seed in 0u64..1000) {
        let (a, b) = (randn(&[m, k], seed), randn(&[k, n], seed + 1));
        let tape = Tape::new();
        let y = tape.matmul(tape.constant(a.clone()), tape.constant(b.clone())).unwrap();
        let y = tape.value(y).clone();
        for i in 0..m {
            for j in 0..n {
                let want: f64 = (0..k).map(|p| a.data()[i * k + p] * b.data()[p * n + j]).sum();
                prop_assert!((y.data()[i * n + j] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn log_softmax_gradient(cols in 2usize..7, seed in 0u64..1000) {
        let f = |t: &Tape, x| {
            let l = t.log_softmax(x, 1)?;
            t.nll(l, &[0, cols - 1], &[1.0; 2])
        };
        let r = grad_check(f, &randn(&[2, cols], seed), 1e-5).unwrap();
        prop_assert!(r.passes(1e-5), "{}", r.max_rel_error);
    }
}
