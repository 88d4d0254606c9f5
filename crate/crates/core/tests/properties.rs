use proptest::prelude::*;
use uapscan::attacks::{self, AttackKind, Provenance};
use uapscan::detector::{self, AggregateTable};
use uapscan::metrics;
use uapscan::oracle;
use uapscan::{
    ActivationBaseline, Aggregation, Architecture, AttackConfig, ImageBatch, MaskPerturbation, SmallCnn, TapLayer,
    Tensor,
};

fn table(values: Vec<f64>, dim: usize) -> AggregateTable {
    AggregateTable {
        layer: TapLayer::Conv2,
        kind: Aggregation::Mean,
        dim,
        values,
    }
}

/// Score sets drawn from a small integer range so ties are common.
fn score_set(max_len: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec((0i32..20).prop_map(|v| v as f64 * 0.25), 1..=max_len)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn auc_equals_pairwise_probability(pos in score_set(200), neg in score_set(200)) {
        let got = metrics::auc(&pos, &neg).unwrap();
        let want = oracle::pairwise_auc(&pos, &neg);
        prop_assert!((got - want).abs() <= 1e-12, "{got} vs {want}");
    }

    #[test]
    fn auc_with_continuous_scores(
        pos in prop::collection::vec(-5.0f64..5.0, 1..=200),
        neg in prop::collection::vec(-5.0f64..5.0, 1..=200),
    ) {
        let got = metrics::auc(&pos, &neg).unwrap();
        prop_assert!((got - oracle::pairwise_auc(&pos, &neg)).abs() <= 1e-12);
    }

    #[test]
    fn roc_points_are_monotone(pos in score_set(60), neg in score_set(60)) {
        let roc = metrics::roc_curve(&pos, &neg).unwrap();
        prop_assert_eq!(roc.points[0], (0.0, 0.0));
        prop_assert_eq!(*roc.points.last().unwrap(), (1.0, 1.0));
        for w in roc.points.windows(2) {
            prop_assert!(w[1].0 >= w[0].0 && w[1].1 >= w[0].1);
        }
        prop_assert!((0.0..=1.0).contains(&roc.auc));
    }

    #[test]
    fn z_scores_are_invariant_to_positive_scaling(
        rows in prop::collection::vec(prop::collection::vec(0.1f64..5.0, 4), 3..12),
        probe in prop::collection::vec(0.0f64..6.0, 4),
        scale in 0.5f64..8.0,
    ) {
        let flat: Vec<f64> = rows.concat();
        let b1 = ActivationBaseline::from_table(&table(flat.clone(), 4), "a").unwrap();
        let b2 = ActivationBaseline::from_table(&table(flat.iter().map(|v| v * scale).collect(), 4), "a").unwrap();
        let scaled: Vec<f64> = probe.iter().map(|v| v * scale).collect();
        let (z1, z2) = (b1.z_scores(&probe), b2.z_scores(&scaled));
        for (a, b) in z1.iter().zip(&z2) {
            // mu and sigma are stored in single precision
            prop_assert!((a - b).abs() <= 1e-4 * (1.0 + a.abs()), "{a} vs {b}");
        }
    }

    #[test]
    fn top_average_with_full_percentile_is_the_mean(z in prop::collection::vec(-10.0f64..10.0, 1..64)) {
        let mean = z.iter().sum::<f64>() / z.len() as f64;
        prop_assert!((detector::z_top_avg(&z, 1.0) - mean).abs() < 1e-9);
    }

    #[test]
    fn top_average_is_non_increasing_in_t(z in prop::collection::vec(-10.0f64..10.0, 1..64)) {
        let grid = [0.01, 0.05, 0.1, 0.25, 0.5, 1.0];
        let s: Vec<f64> = grid.iter().map(|&t| detector::z_top_avg(&z, t)).collect();
        for w in s.windows(2) {
            prop_assert!(w[1] <= w[0] + 1e-12);
        }
        let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(s[0] <= max);
    }

    #[test]
    fn calibrated_threshold_bounds_the_false_positive_rate(
        scores in prop::collection::vec((0i32..50).prop_map(f64::from), 20..400),
        r in prop::sample::select(vec![0.01, 0.05, 0.1, 0.2]),
    ) {
        prop_assume!(scores.len() as f64 >= 1.0 / r);
        let theta = detector::calibrate_threshold(&scores, r).unwrap();
        let above = scores.iter().filter(|&&s| s > theta).count();
        prop_assert!(above as f64 <= (r * scores.len() as f64 + 1e-9).floor());
        prop_assert!(scores.contains(&theta));
    }

    #[test]
    fn mask_application_stays_in_range(
        eps in 0.0f32..0.5,
        seed in 0u64..1000,
    ) {
        let delta = attacks::random_sign_mask([1, 5, 5], eps, seed);
        let m = MaskPerturbation::new(delta, eps, Provenance::new(AttackKind::RandomSign, &AttackConfig::default())).unwrap();
        let images = Tensor::from_fn(&[3, 1, 5, 5], |i| (i % 7) as f32 / 6.0);
        let out = m.apply(&images).unwrap();
        for (o, x) in out.data().iter().zip(images.data()) {
            prop_assert!((0.0..=1.0).contains(o));
            prop_assert!((o - x).abs() <= eps + 1e-7);
        }
    }
}

fn tiny_batch(n: usize) -> (SmallCnn, ImageBatch) {
    let arch = Architecture::new(1, 16, 16, 10).unwrap();
    let model = SmallCnn::init(arch, 3);
    let images = Tensor::from_fn(&[n, 1, 16, 16], |i| ((i * 2654435761) % 1000) as f32 / 1000.0);
    let labels = (0..n).map(|i| i % 10).collect();
    let batch = ImageBatch::new(images, labels, (0..n as u64).collect(), 10).unwrap();
    (model, batch)
}

#[test]
fn attack_outputs_respect_the_budget() {
    let (model, data) = tiny_batch(12);
    for eps in [0.0f32, 2.0 / 255.0, 0.1] {
        let cfg = AttackConfig {
            epsilon: eps,
            iterations: 5,
            batch_size: 4,
            ..AttackConfig::default()
        };
        let masks = [
            attacks::sgd_uap(&model, &data, &cfg).unwrap(),
            attacks::sgd_layer(
                &model,
                &data,
                &AttackConfig {
                    layer: Some(TapLayer::Conv3),
                    ..cfg.clone()
                },
            )
            .unwrap(),
            attacks::sgd_uap(
                &model,
                &data,
                &AttackConfig {
                    target: Some(2),
                    ..cfg.clone()
                },
            )
            .unwrap(),
        ];
        for m in &masks {
            assert!(m.delta().max_abs() <= eps, "{} > {eps}", m.delta().max_abs());
        }
    }
}

#[test]
fn zero_budget_leaves_predictions_unchanged() {
    let (model, data) = tiny_batch(10);
    let cfg = AttackConfig {
        epsilon: 0.0,
        ..AttackConfig::default()
    };
    let m = attacks::sgd_uap(&model, &data, &cfg).unwrap();
    let clean = model.predict_labels(data.images()).unwrap();
    let err = metrics::uer_from_predictions(&clean, data.labels()).unwrap();
    assert_eq!(metrics::uer(&model, &m.into(), &data, 0).unwrap(), err);
}
