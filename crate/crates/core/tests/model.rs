use biasprobe::data::{generate, split_of, DatasetSpec, Split};
use biasprobe::model::{
    checkpoint_bytes, checkpoint_from_bytes, cross_entropy, train, ClassifierHead, Dense, FrozenClassifier,
    TrainConfig,
};
use biasprobe::probe::probe_step;
use proptest::prelude::*;

fn dense(fan_in: usize, fan_out: usize, values: &[f32]) -> Dense {
    let weight = values.iter().cycle().take(fan_in * fan_out).copied().collect();
    let bias = values.iter().rev().cycle().take(fan_out).map(|v| v * 0.1).collect();
    Dense::new(fan_in, fan_out, weight, bias).unwrap()
}

/// A random `input → hidden → p → classes` classifier.
fn classifier() -> impl Strategy<Value = FrozenClassifier> {
    (2usize..12, 2usize..16, 2usize..8, prop::collection::vec(-1.0f32..1.0, 64..256)).prop_map(
        |(input, p, classes, values)| {
            FrozenClassifier::from_layers(
                vec![dense(input, 10, &values), dense(10, p, &values[7..])],
                dense(p, classes, &values[3..]),
            )
            .unwrap()
        },
    )
}

fn relative_error(exact: &[f64], approx: &[f64]) -> f64 {
    let diff: f64 = exact.iter().zip(approx).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
    let scale = exact.iter().map(|a| a * a).sum::<f64>().sqrt();
    diff / scale.max(1e-8)
}

fn central_differences(model: &FrozenClassifier, a: &[f64], y: usize) -> Vec<f64> {
    let h = 1e-5;
    (0..a.len())
        .map(|i| {
            let mut plus = a.to_vec();
            let mut minus = a.to_vec();
            plus[i] += h;
            minus[i] -= h;
            let lp = cross_entropy(&model.head_logits(&plus).unwrap(), y);
            let lm = cross_entropy(&model.head_logits(&minus).unwrap(), y);
            (lp - lm) / (2.0 * h)
        })
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn head_gradient_matches_finite_differences(
        model in classifier(),
        a_raw in prop::collection::vec(0.0f64..3.0, 16),
        y_raw in 0usize..8,
    ) {
        let a = &a_raw[..model.representation_width()];
        let y = y_raw % model.classes();
        let exact = model.head_gradient(a, y).unwrap();
        let fd = central_differences(&model, a, y);
        prop_assert!(relative_error(&exact, &fd) <= 1e-4, "{exact:?} vs {fd:?}");
        // The standalone head agrees with the model it came from.
        let head = model.head_params();
        let via_head = head.gradient(a, y).unwrap();
        prop_assert!(relative_error(&exact, &via_head) <= 1e-12);
    }

    #[test]
    fn features_are_nonnegative(model in classifier(), x in prop::collection::vec(-2.0f32..2.0, 12)) {
        let feats = model.features_raw(&x[..model.input_len()]).unwrap();
        prop_assert!(feats.iter().all(|&v| v >= 0.0));
        prop_assert_eq!(feats.len(), model.representation_width());
    }

    #[test]
    fn probe_step_stays_nonnegative(model in classifier(), a_raw in prop::collection::vec(0.0f64..3.0, 16), d in 1e-3f64..1e5) {
        let a = &a_raw[..model.representation_width()];
        let stepped = probe_step(&model, a, 0, d).unwrap();
        prop_assert!(stepped.iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn checkpoints_round_trip(model in classifier()) {
        let bytes = checkpoint_bytes(&model);
        prop_assert_eq!(checkpoint_from_bytes(&bytes).unwrap(), model);
    }
}

#[test]
fn training_is_seed_deterministic() {
    let spec = DatasetSpec {
        n_train: 300,
        n_audit: 0,
        n_test: 0,
        seed: 5,
        ..Default::default()
    };
    let data = split_of(&generate(&spec).unwrap(), Split::Train);
    let cfg = TrainConfig {
        epochs: 2,
        hidden: vec![16, 8],
        seed: 5,
        ..Default::default()
    };
    let a = train(&data, 10, &cfg).unwrap();
    let b = train(&data, 10, &cfg).unwrap();
    assert_eq!(checkpoint_bytes(&a.model), checkpoint_bytes(&b.model));
    assert_eq!(a.loss_trace, b.loss_trace);
    let other = train(&data, 10, &TrainConfig { seed: 6, ..cfg }).unwrap();
    assert_ne!(checkpoint_bytes(&a.model), checkpoint_bytes(&other.model));
}
