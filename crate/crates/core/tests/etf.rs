use nalgebra::DMatrix;
use proptest::prelude::*;
use tailnas::autodiff::Tape;
use tailnas::etf::{build_etf, etf_logits, verify_etf, verify_etf_matrix};
use tailnas::tensor::Tensor;

fn to_matrix(t: &Tensor) -> DMatrix<f64> {
    DMatrix::from_row_slice(t.shape()[0], t.shape()[1], t.data())
}

#[test]
fn ten_classes_at_unit_energy() {
    let etf = build_etf(64, 10, 1.0, 0).unwrap();
    let report = verify_etf(&etf, 1e-8);
    assert!(report.passed);
    assert!((report.mean_angle_degrees - 96.4).abs() < 0.05);
    assert!((report.mean_angle_degrees - (-1.0f64 / 9.0).acos().to_degrees()).abs() < 1e-9);
    let w = to_matrix(&etf.w);
    for j in 0..10 {
        assert!((w.column(j).norm() - 1.0).abs() < 1e-12);
    }
}

#[test]
fn gram_matrix_matches_closed_form() {
    let (d, c, e) = (12, 5, 2.5);
    let etf = build_etf(d, c, e, 7).unwrap();
    let u = to_matrix(&etf.u);
    assert!((u.transpose() * &u - DMatrix::<f64>::identity(c, c)).amax() < 1e-12);
    let w = to_matrix(&etf.w);
    let centering = DMatrix::<f64>::identity(c, c) - DMatrix::from_element(c, c, 1.0 / c as f64);
    let expected = centering * (e * c as f64 / (c as f64 - 1.0));
    assert!((w.transpose() * &w - expected).amax() < 1e-12);
}

#[test]
fn faults_and_symmetries() {
    let etf = build_etf(8, 4, 1.0, 1).unwrap();
    let mut scaled = etf.w.clone();
    for r in 0..8 {
        scaled.data_mut()[r * 4 + 2] *= 1.01;
    }
    let report = verify_etf_matrix(&scaled, 1.0, 1e-8);
    assert!(!report.norm_ok && !report.passed);

    let perm = [3, 0, 2, 1];
    let data: Vec<f64> = (0..8)
        .flat_map(|r| perm.map(|j| etf.w.data()[r * 4 + j]))
        .collect();
    let permuted = Tensor::new(vec![8, 4], data).unwrap();
    assert!(verify_etf_matrix(&permuted, 1.0, 1e-8).passed);
}

#[test]
fn invalid_shapes_are_rejected() {
    assert!(build_etf(3, 4, 1.0, 0).is_err());
    assert!(build_etf(4, 1, 1.0, 0).is_err());
    assert!(build_etf(4, 3, 0.0, 0).is_err());
    assert_eq!(
        build_etf(16, 4, 1.0, 9).unwrap(),
        build_etf(16, 4, 1.0, 9).unwrap()
    );
}

#[test]
fn logits_and_frozen_gradient() {
    let etf = build_etf(6, 4, 1.0, 2).unwrap();
    let zeros = etf_logits(&etf, &Tensor::zeros(vec![1, 6])).unwrap();
    assert!(zeros.data().iter().all(|&v| v == 0.0));
    let tape = Tape::new();
    let x = tape.param(Tensor::full(vec![3, 6], 0.5));
    let logits = etf.logits_on(&tape, x).unwrap();
    let loss = tape.sum(logits).unwrap();
    let grads = tape.backward(loss).unwrap();
    let gx = grads.get(x).unwrap();
    let row_sums: Vec<f64> = (0..6)
        .map(|r| etf.w.data()[r * 4..(r + 1) * 4].iter().sum())
        .collect();
    for (i, g) in gx.data().iter().enumerate() {
        assert!((g - row_sums[i % 6]).abs() < 1e-12);
    }
    assert!(!tape.requires_grad(tape.constant(etf.w.clone())));
}

proptest! {
    #[test]
    fn self_alignment_picks_own_class(c in 2usize..12, extra in 0usize..6, seed in 0u64..500, j in 0usize..12, t in 0.1f64..10.0) {
        let j = j % c;
        let d = c + extra;
        let etf = build_etf(d, c, 1.0, seed).unwrap();
        prop_assert!(verify_etf(&etf, 1e-9).passed);
        let feat: Vec<f64> = (0..d).map(|r| t * etf.w.data()[r * c + j]).collect();
        let logits = etf_logits(&etf, &Tensor::new(vec![1, d], feat).unwrap()).unwrap();
        let best = (0..c).max_by(|&a, &b| logits.data()[a].total_cmp(&logits.data()[b])).unwrap();
        prop_assert_eq!(best, j);
    }
}
