use nalgebra::{DMatrix, DVector, SymmetricEigen};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tailnas::data::{bilevel_split, synthesize, LabeledDataset, LongTailSpec};
use tailnas::error::Error;
use tailnas::search::{
    classifier_bias_report, hessian_lambda_max, search, BiasReport, EpochRecord, HessianProbe,
    Order, SearchConfig, SearchData, SearchIo, SearchOutcome, SearchTrace,
};
use tailnas::supernet::{ArchConfig, ClassifierKind};
use tailnas::tensor::Tensor;

fn quadratic(a: DMatrix<f64>) -> impl FnMut(&[f64]) -> tailnas::error::Result<Vec<f64>> {
    move |x: &[f64]| {
        Ok((&a * DMatrix::from_column_slice(x.len(), 1, x))
            .as_slice()
            .to_vec())
    }
}

fn probe(iters: usize) -> HessianProbe {
    HessianProbe {
        power_iters: iters,
        tol: 1e-12,
        ..HessianProbe::default()
    }
}

#[test]
fn diagonal_and_flat_losses() {
    let r = hessian_lambda_max(
        &probe(200),
        quadratic(DMatrix::from_diagonal(&DVector::from_vec(vec![3.0, 1.0]))),
        &[0.2, -0.1],
    )
    .unwrap();
    assert!((r.eigenvalue - 3.0).abs() < 1e-6 && r.converged);
    let flat = hessian_lambda_max(
        &probe(20),
        |x: &[f64]| Ok(vec![0.0; x.len()]),
        &[1.0, 2.0, 3.0],
    )
    .unwrap();
    assert!(flat.eigenvalue.abs() < 1e-9);
}

#[test]
fn budget_exhaustion_is_flagged() {
    let a = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 0.999, 0.5]));
    let r = hessian_lambda_max(&probe(2), quadratic(a), &[0.0; 3]).unwrap();
    assert!(!r.converged);
    assert_eq!(r.iterations, 2);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]
    #[test]
    fn matches_dense_eigensolver(seed in 0u64..10_000) {
        let b = Tensor::randn(vec![5, 5], 1.0, &mut ChaCha8Rng::seed_from_u64(seed));
        let b = DMatrix::from_row_slice(5, 5, b.data());
        let a = (&b + b.transpose()) * 0.5;
        let eig = SymmetricEigen::new(a.clone()).eigenvalues;
        let extreme = eig.iter().copied().max_by(|x, y| x.abs().total_cmp(&y.abs())).unwrap();
        let mut sorted: Vec<f64> = eig.iter().map(|v| v.abs()).collect();
        sorted.sort_by(|x, y| y.total_cmp(x));
        prop_assume!(sorted[0] - sorted[1] > 0.05 * sorted[0]);
        let r = hessian_lambda_max(&probe(5000), quadratic(a), &[0.1; 5]).unwrap();
        prop_assert!((r.eigenvalue - extreme).abs() <= 1e-3 * extreme.abs(), "{} vs {}", r.eigenvalue, extreme);
    }
}

fn record(epoch: usize, norms: Vec<f64>) -> EpochRecord {
    let n = norms.len() as f64;
    let mean = norms.iter().sum::<f64>() / n;
    let std = (norms.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
    EpochRecord {
        epoch,
        lr: 0.1,
        train_loss: 1.0,
        val_loss: 1.0,
        val_balanced_acc: 0.5,
        alpha_hash: String::new(),
        mix_sum_max_dev: 0.0,
        norm_mean: mean,
        norm_std: std,
        angles: Default::default(),
        lambda_max: None,
        lambda_residual: None,
        lambda_converged: None,
        class_norms: norms,
    }
}

#[test]
fn injected_norm_growth_drifts_monotonically() {
    let trace = SearchTrace {
        classifier: Some(ClassifierKind::Trainable),
        records: (1..=6)
            .map(|e| record(e, vec![1.0 + 0.3 * e as f64, 1.0, 1.0]))
            .collect(),
    };
    let report = classifier_bias_report(&trace).unwrap();
    for w in report.rows.windows(2) {
        assert!(w[1].drift_from_start > w[0].drift_from_start);
    }
    assert_eq!(
        BiasReport::from_csv(&report.to_csv().unwrap())
            .unwrap()
            .rows
            .len(),
        6
    );
    assert!(classifier_bias_report(&SearchTrace::default()).is_err());
}

struct Tiny {
    split: (LabeledDataset, LabeledDataset),
    test: LabeledDataset,
    counts: Vec<usize>,
}

fn tiny() -> Tiny {
    let spec = LongTailSpec {
        classes: 4,
        n_max: 16,
        rho: 8.0,
        height: 12,
        width: 12,
        test_per_class: 4,
        ..LongTailSpec::default()
    };
    let (train, test) = synthesize(&spec).unwrap();
    let s = bilevel_split(&train, 0.5, 0).unwrap();
    Tiny {
        split: (s.w_set, s.alpha_set),
        test,
        counts: train.per_class_counts(),
    }
}

fn arch() -> ArchConfig {
    ArchConfig {
        n_cells: 3,
        init_channels: 4,
        n_nodes: 2,
        ..ArchConfig::default()
    }
}

fn run(cfg: &SearchConfig, data: &Tiny, io: &SearchIo) -> tailnas::error::Result<SearchOutcome> {
    let d = SearchData {
        w_set: &data.split.0,
        alpha_set: &data.split.1,
        test: &data.test,
        class_counts: data.counts.clone(),
    };
    search(cfg, &arch(), d, io)
}

fn cfg(classifier: ClassifierKind, order: Order) -> SearchConfig {
    SearchConfig {
        epochs: 2,
        batch_size: 8,
        classifier,
        order,
        probe_every: 2,
        probe: HessianProbe {
            power_iters: 3,
            batch_size: 8,
            ..HessianProbe::default()
        },
        ..SearchConfig::default()
    }
}

#[test]
fn fixed_classifier_keeps_unit_norms() {
    let data = tiny();
    let out = run(
        &cfg(ClassifierKind::Etf, Order::First),
        &data,
        &SearchIo::default(),
    )
    .unwrap();
    assert_eq!(out.trace.records.len(), 2);
    assert_eq!(out.classifier_hash.0, out.classifier_hash.1);
    for r in &out.trace.records {
        assert!(r.class_norms.iter().all(|n| (n - 1.0).abs() < 1e-12));
        assert_eq!(r.norm_std, 0.0);
        assert!((r.angles.mean - (-1.0f64 / 3.0).acos().to_degrees()).abs() < 1e-9);
        assert!(r.mix_sum_max_dev <= 1e-12);
    }
    assert!(out.trace.records[1].lambda_max.is_some());
    out.genotype.validate(2).unwrap();
}

#[test]
fn runs_are_reproducible_and_orders_differ() {
    let data = tiny();
    let dir = tempfile::tempdir().unwrap();
    let first = cfg(ClassifierKind::Trainable, Order::First);
    let a = run(
        &first,
        &data,
        &SearchIo {
            trace_csv: Some(dir.path().join("a.csv")),
            ..Default::default()
        },
    )
    .unwrap();
    let b = run(
        &first,
        &data,
        &SearchIo {
            trace_csv: Some(dir.path().join("b.csv")),
            ..Default::default()
        },
    )
    .unwrap();
    assert_eq!(a.alpha, b.alpha);
    assert_eq!(a.genotype, b.genotype);
    let text = std::fs::read_to_string(dir.path().join("a.csv")).unwrap();
    assert_eq!(
        text,
        std::fs::read_to_string(dir.path().join("b.csv")).unwrap()
    );
    assert_eq!(
        SearchTrace::from_csv(&text).unwrap().records,
        a.trace.records
    );
    assert_ne!(a.classifier_hash.0, a.classifier_hash.1);

    let second = run(
        &cfg(ClassifierKind::Trainable, Order::Second),
        &data,
        &SearchIo::default(),
    )
    .unwrap();
    assert_ne!(second.alpha, a.alpha);
}

#[test]
fn divergence_writes_snapshot() {
    let data = tiny();
    let dir = tempfile::tempdir().unwrap();
    let mut c = cfg(ClassifierKind::Trainable, Order::First);
    c.w_optimizer.lr = 1e12;
    c.w_optimizer.grad_clip = 0.0;
    let io = SearchIo {
        snapshot_dir: Some(dir.path().to_path_buf()),
        ..Default::default()
    };
    match run(&c, &data, &io) {
        Err(Error::Diverged { .. }) => {
            assert!(dir.path().join("divergence_snapshot.json").exists())
        }
        Err(e) => panic!("unexpected error {e}"),
        Ok(_) => panic!("search should diverge"),
    }
}
