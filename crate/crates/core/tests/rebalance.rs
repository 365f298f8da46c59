use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tailnas::autodiff::grad_check;
use tailnas::rebalance::{
    drw_weights, ldam_margins, loss, loss_on, mixed_loss_on, mixup_batch, ClassBalancedSampler,
    LossKind, LossSpec, MixedBatch, MixupSpec,
};
use tailnas::tensor::Tensor;

fn reference_ce(logits: &[f64], classes: usize, labels: &[usize], weights: &[f64]) -> f64 {
    let mut num = 0.0;
    let mut den = 0.0;
    for (i, &l) in labels.iter().enumerate() {
        let row = &logits[i * classes..(i + 1) * classes];
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|z| (z - m).exp()).sum::<f64>().ln();
        num += weights[l] * (lse - row[l]);
        den += weights[l];
    }
    num / den
}

#[test]
fn uniform_logits_give_log_classes() {
    let spec = LossSpec::ce(vec![5; 10]);
    let v = loss(&spec, &Tensor::zeros(vec![3, 10]), &[0, 4, 9], 0.0).unwrap();
    assert!((v - 10f64.ln()).abs() < 1e-12);
}

#[test]
fn margins_scale_with_quarter_power() {
    let m = ldam_margins(&[16, 1], 0.5);
    assert!((m[1] / m[0] - 2.0).abs() < 1e-12);
    assert_eq!(m[1], 0.5);
}

#[test]
fn ldam_without_margin_is_scaled_ce() {
    let counts = vec![7; 4];
    let spec = LossSpec {
        kind: LossKind::Ldam,
        ldam_max_margin: 0.0,
        ldam_scale: 3.0,
        ..LossSpec::ce(counts.clone())
    };
    let z = Tensor::new(vec![2, 4], vec![0.1, -0.3, 0.7, 0.2, 1.0, 0.0, -1.0, 0.5]).unwrap();
    let scaled = Tensor::new(vec![2, 4], z.data().iter().map(|v| v * 3.0).collect()).unwrap();
    let a = loss(&spec, &z, &[2, 1], 0.0).unwrap();
    let b = loss(&LossSpec::ce(counts), &scaled, &[2, 1], 0.0).unwrap();
    assert_eq!(a, b);
}

#[test]
fn drw_switches_on_late() {
    let spec = LossSpec::ldam_drw(vec![100, 10, 1]);
    assert_eq!(spec.class_weights(0.5), vec![1.0; 3]);
    let late = spec.class_weights(0.9);
    assert_eq!(late, drw_weights(&[100, 10, 1], 0.9999));
    assert!(late[0] < late[1] && late[1] < late[2]);
    assert!((late.iter().sum::<f64>() - 3.0).abs() < 1e-12);
}

#[test]
fn loss_gradients_match_finite_differences() {
    let z = Tensor::new(
        vec![3, 4],
        (0..12).map(|i| ((i * 7) % 5) as f64 * 0.3 - 0.6).collect(),
    )
    .unwrap();
    let labels = [0, 3, 1];
    let small = Tensor::new(vec![3, 4], z.data().iter().map(|v| v * 0.05).collect()).unwrap();
    for (spec, point) in [
        (LossSpec::ce(vec![20, 9, 4, 1]), &z),
        (LossSpec::ldam_drw(vec![20, 9, 4, 1]), &small),
    ] {
        for frac in [0.0, 0.95] {
            let r = grad_check(|t, x| loss_on(t, &spec, x, &labels, frac), point, 1e-5).unwrap();
            assert!(r.passes(1e-4), "{:?} {}", spec.kind, r.max_rel_error);
        }
    }
    let batch = MixedBatch {
        images: Tensor::zeros(vec![3, 1, 1, 1]),
        labels_a: labels.to_vec(),
        labels_b: vec![1, 1, 2],
        lambda: 0.3,
    };
    let spec = LossSpec::ce(vec![1; 4]);
    let r = grad_check(|t, x| mixed_loss_on(t, &spec, x, &batch, 0.0), &z, 1e-5).unwrap();
    assert!(r.passes(1e-4));
}

#[test]
fn mixup_edge_cases() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let images = Tensor::new(vec![2, 1, 1, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
    let off = mixup_batch(&MixupSpec::default(), &images, &[0, 1], &mut rng).unwrap();
    assert_eq!((off.lambda, &off.images), (1.0, &images));

    let on = MixupSpec {
        enabled: true,
        beta_param: 1.0,
    };
    let single = Tensor::new(vec![1, 1, 1, 2], vec![1.0, 2.0]).unwrap();
    assert_eq!(
        mixup_batch(&on, &single, &[0], &mut rng).unwrap().lambda,
        1.0
    );

    let same = Tensor::new(vec![2, 1, 1, 2], vec![5.0, -1.0, 5.0, -1.0]).unwrap();
    let mixed = mixup_batch(&on, &same, &[0, 0], &mut rng).unwrap();
    for (a, b) in mixed.images.data().iter().zip(same.data()) {
        assert!((a - b).abs() < 1e-12);
    }

    let sharp = MixupSpec {
        enabled: true,
        beta_param: 1e4,
    };
    for _ in 0..20 {
        let l = mixup_batch(&sharp, &images, &[0, 1], &mut rng)
            .unwrap()
            .lambda;
        assert!((l - 0.5).abs() < 0.05);
    }
}

#[test]
fn balanced_sampler_frequencies() {
    let labels: Vec<usize> = [500, 50, 5]
        .iter()
        .enumerate()
        .flat_map(|(k, &n)| vec![k; n])
        .collect();
    let sampler = ClassBalancedSampler::new(&labels, 3).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut hits = [0usize; 3];
    for i in sampler.batch(10_000, &mut rng) {
        hits[labels[i]] += 1;
    }
    for h in hits {
        assert!((h as f64 / 10_000.0 - 1.0 / 3.0).abs() < 0.02, "{hits:?}");
    }
    assert!(ClassBalancedSampler::new(&[0, 5], 3).is_err());
}

proptest! {
    #[test]
    fn ce_matches_reference(
        logits in prop::collection::vec(-8.0f64..8.0, 12),
        labels in prop::collection::vec(0usize..4, 3),
        frac in 0.0f64..1.0,
    ) {
        let counts = vec![40, 12, 3, 1];
        let spec = LossSpec { drw: LossSpec::ldam_drw(counts.clone()).drw, ..LossSpec::ce(counts.clone()) };
        let got = loss(&spec, &Tensor::new(vec![3, 4], logits.clone()).unwrap(), &labels, frac).unwrap();
        let want = reference_ce(&logits, 4, &labels, &spec.class_weights(frac));
        prop_assert!((got - want).abs() <= 1e-10 * want.abs().max(1.0));
    }

    #[test]
    fn ldam_margins_are_bounded_and_ordered(counts in prop::collection::vec(1usize..1000, 2..12), max_margin in 0.01f64..2.0) {
        let m = ldam_margins(&counts, max_margin);
        let top = m.iter().copied().fold(0.0, f64::max);
        prop_assert!((top - max_margin).abs() < 1e-12);
        for i in 0..counts.len() {
            for j in 0..counts.len() {
                if counts[i] < counts[j] {
                    prop_assert!(m[i] > m[j]);
                }
            }
        }
    }
}
