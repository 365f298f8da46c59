use proptest::prelude::*;
use tailnas::data::{
    bilevel_split, class_counts, read_dataset, synthesize, write_dataset, LabeledDataset,
    LongTailSpec,
};
use tailnas::tensor::Tensor;

fn spec(classes: usize, n_max: usize, rho: f64) -> LongTailSpec {
    LongTailSpec {
        classes,
        n_max,
        rho,
        height: 6,
        width: 6,
        test_per_class: 3,
        ..LongTailSpec::default()
    }
}

fn labelled(counts: &[usize]) -> LabeledDataset {
    let labels: Vec<usize> = counts
        .iter()
        .enumerate()
        .flat_map(|(k, &n)| std::iter::repeat_n(k, n))
        .collect();
    let n = labels.len();
    let images = Tensor::new(vec![n, 1, 1, 1], (0..n).map(|i| i as f64).collect()).unwrap();
    LabeledDataset::new(images, labels, counts.len()).unwrap()
}

#[test]
fn count_profiles() {
    let c = class_counts(&spec(10, 500, 100.0));
    assert_eq!((c[0], c[9]), (500, 5));
    assert_eq!(class_counts(&spec(4, 37, 1.0)), vec![37; 4]);
    assert_eq!(class_counts(&spec(2, 100, 50.0)), vec![100, 2]);
}

#[test]
fn synthesized_sets_follow_the_profile() {
    let s = spec(5, 40, 10.0);
    let (train, test) = synthesize(&s).unwrap();
    assert_eq!(train.per_class_counts(), class_counts(&s));
    assert_eq!(test.per_class_counts(), vec![3; 5]);
    assert_eq!(train.image_shape(), [3, 6, 6]);
    let (again, _) = synthesize(&s).unwrap();
    assert_eq!(train, again);
    let (other, _) = synthesize(&LongTailSpec { seed: 1, ..s }).unwrap();
    assert_ne!(train.content_hash(), other.content_hash());
}

#[test]
fn stratified_halving() {
    let ds = labelled(&[100, 10]);
    let split = bilevel_split(&ds, 0.5, 3).unwrap();
    assert_eq!(split.w_set.per_class_counts(), vec![50, 5]);
    assert_eq!(split.alpha_set.per_class_counts(), vec![50, 5]);
    assert!(split.warnings.is_empty());
}

#[test]
fn singleton_class_stays_in_weight_set() {
    let split = bilevel_split(&labelled(&[3, 1]), 0.5, 0).unwrap();
    assert_eq!(split.w_set.per_class_counts()[1], 1);
    assert_eq!(split.alpha_set.per_class_counts()[1], 0);
    assert_eq!(split.warnings.len(), 1);
    assert!(bilevel_split(&labelled(&[3, 1]), 1.0, 0).is_err());
}

#[test]
fn binary_format_round_trip() {
    let (train, _) = synthesize(&spec(3, 8, 2.0)).unwrap();
    let mut buf = Vec::new();
    write_dataset(&train, &mut buf).unwrap();
    assert_eq!(read_dataset(buf.as_slice()).unwrap(), train);
    buf.truncate(buf.len() - 1);
    assert!(read_dataset(buf.as_slice()).is_err());
}

#[test]
fn invalid_specs() {
    assert!(synthesize(&spec(1, 10, 2.0)).is_err());
    assert!(synthesize(&spec(3, 10, 0.5)).is_err());
    assert!(synthesize(&LongTailSpec {
        noise: -1.0,
        ..spec(3, 10, 2.0)
    })
    .is_err());
}

proptest! {
    #[test]
    fn counts_are_monotone_and_rounded(classes in 2usize..30, n_max in 1usize..2000, rho in 1.0f64..300.0) {
        let counts = class_counts(&spec(classes, n_max, rho));
        prop_assert_eq!(counts.len(), classes);
        prop_assert_eq!(counts[0], n_max);
        for w in counts.windows(2) {
            prop_assert!(w[0] >= w[1]);
        }
        for (i, &n) in counts.iter().enumerate() {
            let exact = n_max as f64 / rho.powf(i as f64 / (classes - 1) as f64);
            prop_assert!((n as f64 - exact).abs() <= 0.5 + 1e-9 || n == 1);
        }
        let n_min = *counts.last().unwrap() as f64;
        if n_max as f64 / rho >= 1.0 {
            prop_assert!((n_max as f64 / n_min - rho).abs() <= rho / n_min + 1e-9);
        }
    }

    #[test]
    fn split_partitions_each_class(counts in prop::collection::vec(1usize..40, 2..6), fraction in 0.05f64..0.95, seed in 0u64..100) {
        let ds = labelled(&counts);
        let split = bilevel_split(&ds, fraction, seed).unwrap();
        let mut all: Vec<usize> = split.w_indices.iter().chain(&split.alpha_indices).copied().collect();
        all.sort_unstable();
        prop_assert_eq!(all, (0..ds.len()).collect::<Vec<_>>());
        for (k, &n) in counts.iter().enumerate() {
            prop_assert_eq!(split.w_set.per_class_counts()[k], ((n as f64 * fraction).ceil() as usize).min(n));
        }
        let again = bilevel_split(&ds, fraction, seed).unwrap();
        prop_assert_eq!(again.w_indices, split.w_indices);
    }
}
