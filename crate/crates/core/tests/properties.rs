use proptest::prelude::*;

use tempcon::config::ExperimentConfig;
use tempcon::lwm::{local_relevance_weight, ConfidenceMode};
use tempcon::pipeline::{predict, Inference};
use tempcon::pseudolabel::{assign_labels, cosine_distance, generate_pseudo_labels, init_centroids, update_centroids};
use tempcon::synthdata::{batch_indices, generate_domain_pair, BatchMode, Dataset, DomainSpec};
use tempcon::tensorcore::Tensor;
use tempcon::trn::{Hyperparams, ModelParams};

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Tensor> {
    prop::collection::vec(-3.0f64..3.0, rows * cols).prop_map(move |v| Tensor::new(vec![rows, cols], v).unwrap())
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn config_round_trips(
        lr in 1e-6f64..1.0,
        sev in 0.0f64..=1.0,
        alpha in 0.0f64..5.0,
        bs in 2usize..128,
        seed in any::<u64>(),
    ) {
        let mut cfg = ExperimentConfig::default();
        cfg.apply_override(&format!("adapt_learning_rate={lr}")).unwrap();
        cfg.apply_override(&format!("shift_severity={sev}")).unwrap();
        cfg.apply_override(&format!("alpha_local={alpha}")).unwrap();
        cfg.apply_override(&format!("batch_size={bs}")).unwrap();
        cfg.apply_override(&format!("seed={seed}")).unwrap();
        let back = ExperimentConfig::parse(&cfg.emit()).unwrap();
        prop_assert_eq!(back.emit(), cfg.emit());
        prop_assert_eq!(back, cfg);
    }

    #[test]
    fn cosine_distance_ignores_positive_scale(
        a in prop::collection::vec(-5.0f64..5.0, 6),
        b in prop::collection::vec(-5.0f64..5.0, 6),
        s in 0.01f64..100.0,
    ) {
        prop_assume!(a.iter().map(|x| x * x).sum::<f64>() > 1e-3);
        prop_assume!(b.iter().map(|x| x * x).sum::<f64>() > 1e-3);
        let scaled: Vec<f64> = a.iter().map(|x| x * s).collect();
        let d = cosine_distance(&a, &b);
        prop_assert!((d - cosine_distance(&scaled, &b)).abs() < 1e-9);
        prop_assert!((-1e-12..=2.0 + 1e-12).contains(&d));
    }

    #[test]
    fn pseudo_labels_are_in_range_and_stable(features in matrix(12, 4), logits in matrix(12, 3)) {
        let labels = generate_pseudo_labels(&features, &logits, 1).unwrap();
        prop_assert_eq!(labels.len(), 12);
        prop_assert!(labels.iter().all(|&l| l < 3));
        prop_assert_eq!(&labels, &generate_pseudo_labels(&features, &logits, 1).unwrap());
    }

    #[test]
    fn assignment_picks_the_lowest_nearest_centroid(features in matrix(10, 3), logits in matrix(10, 3)) {
        let table = init_centroids(&features, &logits).unwrap();
        let labels = assign_labels(&features, &table);
        let updated = update_centroids(&features, &labels, &table).unwrap();
        for t in [&table, &updated] {
            for (i, &l) in assign_labels(&features, t).iter().enumerate() {
                let d: Vec<f64> = (0..3).map(|c| cosine_distance(features.row(i), t.centroids.row(c))).collect();
                let best = d.iter().copied().fold(f64::INFINITY, f64::min);
                prop_assert_eq!(d[l], best);
                prop_assert!(d[..l].iter().all(|&x| x > best));
            }
        }
    }

    #[test]
    fn argmax_ignores_positive_logit_scale(row in prop::collection::vec(-4.0f64..4.0, 5), s in 0.1f64..10.0) {
        let scaled: Vec<f64> = row.iter().map(|x| x * s).collect();
        prop_assert_eq!(argmax(&row), argmax(&scaled));
    }

    #[test]
    fn weights_lie_in_unit_interval(local in prop::collection::vec(matrix(4, 5), 1..4)) {
        let w = local_relevance_weight(&local, ConfidenceMode::Normalized).unwrap();
        prop_assert_eq!(w.shape(), &[4, local.len()][..]);
        prop_assert!(w.data().iter().all(|&x| (-1e-12..=1.0 + 1e-12).contains(&x)));
    }

    #[test]
    fn equal_local_predictions_get_equal_weights(logits in matrix(3, 4), scales in 1usize..5) {
        let local = vec![logits; scales];
        let w = local_relevance_weight(&local, ConfidenceMode::Normalized).unwrap();
        for b in 0..3 {
            let row = w.row(b);
            prop_assert!(row.iter().all(|&x| (x - row[0]).abs() < 1e-15));
        }
    }

    #[test]
    fn train_batches_are_disjoint_and_full(n in 2usize..200, bs in 2usize..40, seed in any::<u64>()) {
        let batches = batch_indices(n, bs, Some(seed), BatchMode::Train).unwrap();
        prop_assert_eq!(batches.len(), n / bs);
        let mut seen = vec![false; n];
        for b in &batches {
            prop_assert_eq!(b.len(), bs);
            for &i in b {
                prop_assert!(!seen[i]);
                seen[i] = true;
            }
        }
    }

    #[test]
    fn eval_batches_cover_in_order(n in 1usize..200, bs in 1usize..40) {
        let flat: Vec<usize> = batch_indices(n, bs, None, BatchMode::Eval).unwrap().concat();
        prop_assert_eq!(flat, (0..n).collect::<Vec<_>>());
    }
}

fn tiny() -> (Dataset, ModelParams) {
    let spec = DomainSpec {
        classes: 3,
        videos_per_class: 6,
        frames: 4,
        frame_dim: 6,
        seed: 3,
        ..DomainSpec::default()
    };
    let (_, target) = generate_domain_pair(&spec).unwrap();
    let hp = Hyperparams {
        k: 4,
        d_in: 6,
        enc_hidden: 8,
        d_enc: 8,
        rel_hidden: 8,
        d: 8,
        d_b: 8,
        classes: 3,
        m_max: 3,
    };
    let mut model = ModelParams::init(hp, 5);
    model.head.batch_norm.initialized = true;
    (target, model)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn eval_predictions_follow_sample_permutation(perm in Just((0..18).collect::<Vec<usize>>()).prop_shuffle()) {
        let (ds, model) = tiny();
        let shuffled = Dataset::new(
            ds.domain.clone(),
            ds.classes,
            perm.iter().map(|&i| ds.samples[i].clone()).collect(),
        )
        .unwrap();
        for inference in [Inference::Plain, Inference::Weighted] {
            let base = predict(&model, &ds, inference).unwrap();
            let moved = predict(&model, &shuffled, inference).unwrap();
            for (j, &i) in perm.iter().enumerate() {
                prop_assert_eq!(moved.row(j), base.row(i));
            }
        }
    }
}
