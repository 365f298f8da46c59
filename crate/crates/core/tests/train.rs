use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tailnas::autodiff::ConvAttrs;
use tailnas::data::{synthesize, LabeledDataset, LongTailSpec};
use tailnas::error::Result;
use tailnas::experiments::Backbone;
use tailnas::nn::{Layer, NormKind, ParamStore};
use tailnas::ops::{OpKind, OpOptions};
use tailnas::rebalance::CrtSpec;
use tailnas::supernet::{ArchConfig, ClassifierKind, GeneEdge, Genotype, Network};
use tailnas::tensor::Tensor;
use tailnas::train::{
    count_parameters, crt_retrain, curve_to_csv, evaluate, fit, train_from_scratch,
    GroupThresholds, Model, TrainConfig,
};

fn genotype() -> Genotype {
    let cell = |op| {
        vec![
            GeneEdge(2, 0, op),
            GeneEdge(2, 1, OpKind::SkipConnect),
            GeneEdge(3, 1, op),
            GeneEdge(3, 2, op),
        ]
    };
    Genotype {
        normal: cell(OpKind::SepConv3x3),
        reduce: cell(OpKind::MaxPool3x3),
        meta: Default::default(),
    }
}

fn arch() -> ArchConfig {
    ArchConfig {
        n_cells: 3,
        init_channels: 6,
        n_nodes: 2,
        ..ArchConfig::default()
    }
}

fn data(rho: f64, n_max: usize) -> (LabeledDataset, LabeledDataset) {
    synthesize(&LongTailSpec {
        classes: 4,
        n_max,
        rho,
        height: 12,
        width: 12,
        test_per_class: 10,
        ..LongTailSpec::default()
    })
    .unwrap()
}

fn cfg(epochs: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        batch_size: 16,
        ..TrainConfig::default()
    }
}

#[test]
fn parameter_counting() {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    Layer::conv(
        &mut store,
        "c",
        4,
        4,
        3,
        ConvAttrs::same(3, 1, 1, 1),
        &mut rng,
    )
    .unwrap();
    assert_eq!(store.scalar_count(), 144);
    Layer::norm(&mut store, "bn", NormKind::Batch, 4);
    assert_eq!(store.scalar_count(), 152);

    let g = genotype();
    let arch = ArchConfig {
        init_channels: 8,
        ..arch()
    };
    let lin = Network::discrete(&g, &arch, 3, 10, ClassifierKind::Trainable, 0).unwrap();
    let etf = Network::discrete(&g, &arch, 3, 10, ClassifierKind::Etf, 0).unwrap();
    assert_eq!(arch.feature_dim().unwrap(), 64);
    assert_eq!(
        count_parameters(&lin) - count_parameters(&etf),
        64 * 10 + 10
    );
    let structural: usize = lin.params.params().iter().map(|p| p.value.len()).sum();
    assert_eq!(count_parameters(&lin), structural);
}

#[test]
fn zero_epochs_stay_near_chance() {
    let (train, test) = data(1.0, 8);
    let out = train_from_scratch(&genotype(), &arch(), &cfg(0), &train, &test).unwrap();
    assert!(out.curve.is_empty());
    assert_eq!(
        curve_to_csv(&out.curve).unwrap().trim(),
        "epoch,lr,train_loss,test_balanced_acc"
    );
    let mut net = out.network;
    let report = evaluate(
        &mut net,
        &test,
        &train.per_class_counts(),
        GroupThresholds::default(),
        "h",
        0,
    )
    .unwrap();
    assert!(
        report.overall_accuracy <= 0.5,
        "{}",
        report.overall_accuracy
    );
}

#[test]
fn balanced_task_tracks_plain_baseline() {
    let (train, test) = data(1.0, 40);
    let c = cfg(8);
    let out = train_from_scratch(&genotype(), &arch(), &c, &train, &test).unwrap();
    let again = train_from_scratch(&genotype(), &arch(), &c, &train, &test).unwrap();
    assert_eq!(out.curve, again.curve);

    let mut baseline =
        Backbone::with_op(OpKind::SepConv3x3, &OpOptions::default(), 3, 8, 4, 0).unwrap();
    let base_curve = fit(&mut baseline, &c, &train, &test).unwrap();
    let ours = out.curve.last().unwrap().test_balanced_acc;
    let base = base_curve.last().unwrap().test_balanced_acc;
    assert!(base > 0.5, "baseline {base}");
    assert!(ours > 0.9 * base, "{ours} vs baseline {base}");
}

#[test]
fn classifier_retraining_freezes_backbone() {
    let (train, test) = data(10.0, 20);
    let mut net = train_from_scratch(&genotype(), &arch(), &cfg(1), &train, &test)
        .unwrap()
        .network;
    let head_before = net.classifier_weights();
    let out = crt_retrain(&mut net, &CrtSpec::default(), &train, 8, 0.05, 0).unwrap();
    assert!(out.notice.is_none());
    assert_eq!(out.backbone_hash_before, out.backbone_hash_after);
    assert_ne!(net.classifier_weights(), head_before);

    let mut etf = Network::discrete(&genotype(), &arch(), 3, 4, ClassifierKind::Etf, 0).unwrap();
    let out = crt_retrain(&mut etf, &CrtSpec::default(), &train, 8, 0.05, 0).unwrap();
    assert!(out.notice.unwrap().contains("ETF"));
    assert_eq!(out.epochs, 0);
}

struct Stub {
    classes: usize,
    answer: Option<usize>,
    labels: Vec<usize>,
}

impl Model for Stub {
    fn logits(&mut self, images: &Tensor) -> Result<Tensor> {
        let n = images.shape()[0];
        let mut z = vec![0.0; n * self.classes];
        for i in 0..n {
            let k = self.answer.unwrap_or_else(|| self.labels[i]);
            z[i * self.classes + k] = 1.0;
        }
        Tensor::new(vec![n, self.classes], z)
    }

    fn parameter_count(&self) -> usize {
        0
    }
}

fn balanced_test(classes: usize, per: usize) -> LabeledDataset {
    let labels: Vec<usize> = (0..classes * per).map(|i| i % classes).collect();
    LabeledDataset::new(Tensor::zeros(vec![labels.len(), 1, 1, 1]), labels, classes).unwrap()
}

#[test]
fn stub_reports() {
    let test = balanced_test(10, 3);
    let counts: Vec<usize> = (0..10).map(|k| 100 / (k + 1)).collect();
    let mut perfect = Stub {
        classes: 10,
        answer: None,
        labels: test.labels.clone(),
    };
    let r = evaluate(
        &mut perfect,
        &test,
        &counts,
        GroupThresholds::default(),
        "h",
        1,
    )
    .unwrap();
    assert_eq!(r.overall_accuracy, 1.0);
    assert!(r.per_class_accuracy.iter().all(|&a| a == 1.0));

    let mut majority = Stub {
        classes: 10,
        answer: Some(0),
        labels: vec![],
    };
    let r = evaluate(
        &mut majority,
        &test,
        &counts,
        GroupThresholds::default(),
        "h",
        1,
    )
    .unwrap();
    assert!((r.overall_accuracy - 0.1).abs() < 1e-12);
    assert_eq!(
        r.per_class_accuracy.iter().filter(|&&a| a == 1.0).count(),
        1
    );
    assert_eq!(
        r.per_class_accuracy.iter().filter(|&&a| a == 0.0).count(),
        9
    );
    assert_eq!(r.many.classes, vec![0]);
    assert_eq!(r.few.classes, vec![8, 9]);
    let weighted: f64 = [&r.many, &r.medium, &r.few]
        .iter()
        .filter_map(|g| g.accuracy.map(|a| a * g.classes.len() as f64))
        .sum::<f64>()
        / 10.0;
    assert!((weighted - r.overall_accuracy).abs() < 1e-12);

    let missing = LabeledDataset::new(Tensor::zeros(vec![2, 1, 1, 1]), vec![0, 1], 10).unwrap();
    assert!(evaluate(
        &mut majority,
        &missing,
        &counts,
        GroupThresholds::default(),
        "h",
        1
    )
    .is_err());
}

#[test]
fn evaluation_is_pure_and_order_free() {
    let (train, test) = data(5.0, 12);
    let mut net =
        Network::discrete(&genotype(), &arch(), 3, 4, ClassifierKind::Trainable, 3).unwrap();
    let counts = train.per_class_counts();
    let a = evaluate(&mut net, &test, &counts, GroupThresholds::default(), "h", 0).unwrap();
    let b = evaluate(&mut net, &test, &counts, GroupThresholds::default(), "h", 0).unwrap();
    assert_eq!(a, b);
    let perm: Vec<usize> = (0..test.len()).rev().collect();
    let c = evaluate(
        &mut net,
        &test.subset(&perm),
        &counts,
        GroupThresholds::default(),
        "h",
        0,
    )
    .unwrap();
    assert_eq!(a.per_class_accuracy, c.per_class_accuracy);
}
