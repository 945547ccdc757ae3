use biasprobe::concepts::ConceptBank;
use biasprobe::data::HeadParams;
use biasprobe::linalg::Matrix;
use biasprobe::model::ClassifierHead;
use biasprobe::probe::{
    bias_score, error_sets_from, estimators, identify, probe_step, AuditRepresentations, ProbeConfig, StepLabel,
};
use proptest::prelude::*;

fn bank(class_id: usize, concepts: Matrix) -> ConceptBank {
    let r = concepts.cols();
    ConceptBank {
        class_id,
        concepts,
        patch_refs: vec![Vec::new(); r],
        nmf_objective: 0.0,
        seed: 0,
        patch_size: 6,
        stride: 3,
    }
}

/// Head, representations and one bank per class, all of width `p`.
fn audit() -> impl Strategy<Value = (HeadParams, AuditRepresentations, Vec<ConceptBank>)> {
    (2usize..6, 2usize..5, 1usize..4, 0usize..25).prop_flat_map(|(p, c, r, n)| {
        (
            prop::collection::vec(-2.0f64..2.0, c * p),
            prop::collection::vec(-1.0f64..1.0, c),
            prop::collection::vec(0.0f64..3.0, n * p),
            prop::collection::vec((0..c, 0..c), n),
            prop::collection::vec(0.0f64..1.0, c * p * r),
        )
            .prop_map(move |(w, b, acts, lp, concepts)| {
                let head = HeadParams {
                    weight: Matrix::new(c, p, w).unwrap(),
                    bias: b,
                };
                let reps = AuditRepresentations::new(
                    (0..n).map(|i| 3 * i + 1).collect(),
                    lp.iter().map(|&(l, _)| l).collect(),
                    lp.iter().map(|&(_, q)| q).collect(),
                    Matrix::new(n, p, acts).unwrap(),
                )
                .unwrap();
                let banks = (0..c)
                    .map(|y| bank(y, Matrix::new(p, r, concepts[y * p * r..(y + 1) * p * r].to_vec()).unwrap()))
                    .collect();
                (head, reps, banks)
            })
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn error_sets_are_disjoint_and_exhaustive(pairs in prop::collection::vec((0usize..4, 0usize..4), 0..60), y in 0usize..4) {
        let labels: Vec<usize> = pairs.iter().map(|p| p.0).collect();
        let preds: Vec<usize> = pairs.iter().map(|p| p.1).collect();
        let ids: Vec<usize> = (0..pairs.len()).collect();
        let sets = error_sets_from(&labels, &preds, &ids, y);
        prop_assert!(sets.fn_samples.iter().all(|i| !sets.fp_samples.contains(i)));
        let labeled = labels.iter().filter(|&&l| l == y).count();
        let correct = labels.iter().zip(&preds).filter(|(&l, &q)| l == y && q == y).count();
        prop_assert_eq!(sets.fn_samples.len() + correct, labeled);
        prop_assert!(sets.fp_samples.iter().all(|&i| preds[i] == y && labels[i] != y));
    }

    #[test]
    fn scores_follow_the_estimator_rules((head, reps, banks) in audit(), own in any::<bool>()) {
        let step_label = if own { StepLabel::Own } else { StepLabel::Audited };
        let cfg = ProbeConfig { d: 5.0, step_label, ..Default::default() };
        let id = identify(&head, &reps, &banks, &cfg).unwrap();
        for row in &id.table.rows {
            prop_assert_eq!(row.e_fn.is_some(), row.n_fn > 0);
            prop_assert_eq!(row.e_fp.is_some(), row.n_fp > 0);
            prop_assert_eq!(row.score, bias_score(row.e_fn, row.e_fp));
            prop_assert_eq!(row.score.is_none(), row.n_fn == 0 && row.n_fp == 0);
            if let (Some(a), Some(b)) = (row.e_fn, row.e_fp) {
                prop_assert!((row.score.unwrap() - (a + b) / 2.0).abs() < 1e-15);
            }
            for v in [row.e_fn, row.e_fp, row.score].into_iter().flatten() {
                prop_assert!((-1.0..=1.0).contains(&v));
            }
            prop_assert_eq!(row.is_bias, row.score.is_some_and(|s| s > cfg.tau));
        }
        // Above the attainable maximum nothing is flagged.
        let strict = identify(&head, &reps, &banks, &ProbeConfig { tau: 1.1, ..cfg }).unwrap();
        prop_assert!(strict.bias_set().is_empty());
    }

    #[test]
    fn probe_step_matches_its_closed_form(w in prop::collection::vec(-2.0f64..2.0, 6), a in prop::collection::vec(0.0f64..3.0, 3), y in 0usize..2, d in 0.0f64..100.0) {
        let head = HeadParams { weight: Matrix::new(2, 3, w).unwrap(), bias: vec![0.1, -0.2] };
        let g = head.gradient(&a, y).unwrap();
        let want: Vec<f64> = a.iter().zip(&g).map(|(x, gi)| (x - d * gi).max(0.0)).collect();
        prop_assert_eq!(probe_step(&head, &a, y, d).unwrap(), want);
    }
}

/// Identity head and bank, one false positive of class 0 labeled 1.
fn single_false_positive() -> (HeadParams, AuditRepresentations, ConceptBank) {
    let eye = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
    let head = HeadParams {
        weight: eye.clone(),
        bias: vec![0.0, 0.0],
    };
    let reps = AuditRepresentations::new(vec![7], vec![1], vec![0], Matrix::from_rows(&[vec![1.0, 0.5]]).unwrap())
        .unwrap();
    (head, reps, bank(0, eye))
}

#[test]
fn own_label_step_turns_off_the_misleading_concept() {
    let (head, reps, bank) = single_false_positive();
    let errs = error_sets_from(&reps.labels, &reps.predictions, &reps.ids, 0);
    let cfg = ProbeConfig { d: 10.0, ..Default::default() };
    assert_eq!(cfg.step_label, StepLabel::Own);
    let est = estimators(&head, &reps, &bank, &errs, &cfg).unwrap();
    assert_eq!(est.e_fn, None);
    // Stepping toward label 1 zeroes coordinate 0, the evidence for class 0.
    assert_eq!(est.e_fp, Some(vec![1.0, 0.0]));
}

#[test]
fn audited_label_step_reinforces_the_prediction() {
    let (head, reps, bank) = single_false_positive();
    let errs = error_sets_from(&reps.labels, &reps.predictions, &reps.ids, 0);
    let cfg = ProbeConfig {
        d: 10.0,
        step_label: StepLabel::Audited,
        ..Default::default()
    };
    let est = estimators(&head, &reps, &bank, &errs, &cfg).unwrap();
    assert_eq!(est.e_fp, Some(vec![0.0, 1.0]));
}

#[test]
fn mismatched_bank_is_rejected() {
    let (head, reps, bank) = single_false_positive();
    let errs = error_sets_from(&reps.labels, &reps.predictions, &reps.ids, 1);
    assert!(estimators(&head, &reps, &bank, &errs, &ProbeConfig::default()).is_err());
}
