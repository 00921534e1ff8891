use std::collections::{BTreeMap, BTreeSet};

use proptest::prelude::*;
use relabel::agreement::check_agreement;
use relabel::metrics::{evaluate_model_zoo, margin_of_error, ols_regression, MoeMode};
use relabel::proposals::{generate_proposals, Candidate, EmptySetPolicy, GROUP_SIZE};
use relabel::workflow::{assign_refinement, create_batches};
use relabel::{ClassId, MultiLabelGroundTruth, PredictionRecord};

fn label_set() -> impl Strategy<Value = BTreeSet<ClassId>> {
    prop::collection::btree_set((0u32..12).prop_map(ClassId), 0..5)
}

fn ids(n: usize, prefix: &str) -> Vec<String> {
    (0..n).map(|i| format!("{prefix}{i:05}")).collect()
}

proptest! {
    #[test]
    fn agreement_ignores_annotator_order(
        sets in prop::collection::vec(label_set(), 1..5),
        original in 0u32..12,
        rotate in 0usize..4,
    ) {
        let mut rotated = sets.clone();
        let len = rotated.len();
        rotated.rotate_left(rotate % len);
        let a = check_agreement("i", &sets, ClassId(original)).unwrap();
        let b = check_agreement("i", &rotated, ClassId(original)).unwrap();
        prop_assert_eq!((a.status, a.reason), (b.status, b.reason));
    }

    #[test]
    fn duplicating_a_set_does_not_change_agreement(
        sets in prop::collection::vec(label_set(), 1..4),
        original in 0u32..12,
        pick in 0usize..4,
    ) {
        let mut more = sets.clone();
        more.push(sets[pick % sets.len()].clone());
        let a = check_agreement("i", &sets, ClassId(original)).unwrap();
        let b = check_agreement("i", &more, ClassId(original)).unwrap();
        prop_assert_eq!((a.status, a.reason), (b.status, b.reason));
    }

    #[test]
    fn margin_is_symmetric_and_shrinks_with_n(p in 0.0f64..=1.0, n in 2usize..100_000) {
        for mode in [MoeMode::Wald, MoeMode::AsWritten] {
            let m = margin_of_error(p, n, mode).unwrap().unwrap();
            let mirrored = margin_of_error(1.0 - p, n, mode).unwrap().unwrap();
            prop_assert!((m - mirrored).abs() < 1e-12);
            let larger = margin_of_error(p, n + 1, mode).unwrap().unwrap();
            prop_assert!(larger <= m);
            prop_assert!(m >= 0.0);
        }
    }

    #[test]
    fn ols_recovers_affine_data(
        slope in -5.0f64..5.0,
        intercept in -2.0f64..2.0,
        xs in prop::collection::btree_set(-1000i32..1000, 3..40),
    ) {
        let points: Vec<(f64, f64)> = xs.iter().map(|&x| {
            let x = f64::from(x) / 100.0;
            (x, slope * x + intercept)
        }).collect();
        let fit = ols_regression(&points).unwrap();
        prop_assert!((fit.slope - slope).abs() < 1e-8);
        prop_assert!((fit.intercept - intercept).abs() < 1e-8);
        prop_assert!((fit.r_squared - 1.0).abs() < 1e-9);
    }

    #[test]
    fn proposals_are_a_ranked_prefix_in_groups_of_five(
        scores in prop::collection::vec(0u32..50, 1..60),
        k in 1usize..30,
    ) {
        let probs: Vec<f64> = scores.iter().map(|&s| f64::from(s)).collect();
        let p = generate_proposals(&PredictionRecord::probs("m", "i", probs.clone()), k).unwrap();
        prop_assert_eq!(p.ranked_labels.len(), k.min(probs.len()));
        let unique: BTreeSet<_> = p.ranked_labels.iter().collect();
        prop_assert_eq!(unique.len(), p.ranked_labels.len());
        for w in p.ranked_labels.windows(2) {
            let (a, b) = (probs[w[0].index()], probs[w[1].index()]);
            prop_assert!(a > b || (a == b && w[0] < w[1]));
        }
        let groups = p.groups();
        prop_assert!(groups.iter().all(|g| !g.is_empty() && g.len() <= GROUP_SIZE));
        let flat: Vec<ClassId> = groups.concat();
        prop_assert_eq!(flat, p.ranked_labels.clone());
    }

    #[test]
    fn batches_partition_images_with_near_equal_sizes(
        n in 0usize..500,
        num_batches in 1usize..12,
        roster in 2usize..20,
        per_batch in 1usize..3,
        seed in any::<u64>(),
    ) {
        let images = ids(n, "img");
        let batches = create_batches(&images, num_batches, &ids(roster, "a"), per_batch, seed).unwrap();
        prop_assert_eq!(batches.len(), num_batches);
        let flat: Vec<String> = batches.iter().flat_map(|b| b.image_ids.clone()).collect();
        prop_assert_eq!(&flat, &images);
        let sizes: Vec<usize> = batches.iter().map(|b| b.image_ids.len()).collect();
        prop_assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
        for b in &batches {
            let distinct: BTreeSet<_> = b.assigned_annotators.iter().collect();
            prop_assert_eq!(distinct.len(), per_batch);
        }
    }

    #[test]
    fn refinement_slices_partition_the_queue(n in 0usize..2000, refiners in 1usize..8) {
        let queue = ids(n, "q");
        let who = ids(refiners, "r");
        let slices = assign_refinement(&queue, &who).unwrap();
        let flat: Vec<String> = who.iter().filter_map(|r| slices.get(r)).flatten().cloned().collect();
        prop_assert_eq!(flat, queue);
        let sizes: Vec<usize> = slices.values().map(Vec::len).collect();
        if let (Some(max), Some(min)) = (sizes.iter().max(), sizes.iter().min()) {
            prop_assert!(max - min <= 1);
            prop_assert!(*min > 0);
        }
    }

    #[test]
    fn zoo_report_ignores_model_order(
        seed_preds in prop::collection::vec(prop::collection::vec(0u32..6, 20), 3..8),
        rotate in 0usize..8,
    ) {
        let labels: Vec<MultiLabelGroundTruth> = (0..20)
            .map(|i| MultiLabelGroundTruth::new(format!("i{i:02}"), [i % 6, (i * 7) % 6]))
            .collect();
        let originals: BTreeMap<String, ClassId> = labels.iter().map(|g| (g.image_id.clone(), ClassId(0))).collect();
        let models: Vec<Candidate> = seed_preds.iter().enumerate().map(|(m, p)| Candidate {
            model_id: format!("m{m}"),
            predictions: labels.iter().zip(p).map(|(g, &c)| (g.image_id.clone(), ClassId(c))).collect(),
        }).collect();
        let mut shuffled = models.clone();
        let len = shuffled.len();
        shuffled.rotate_left(rotate % len);
        let a = evaluate_model_zoo(&models, &labels, &originals, EmptySetPolicy::Exclude).unwrap();
        let b = evaluate_model_zoo(&shuffled, &labels, &originals, EmptySetPolicy::Exclude).unwrap();
        prop_assert_eq!(a.leaderboard, b.leaderboard);
        match (a.regression, b.regression) {
            (Ok(x), Ok(y)) => {
                prop_assert!((x.slope - y.slope).abs() < 1e-9);
                prop_assert!((x.r_squared - y.r_squared).abs() < 1e-9);
            }
            (Err(x), Err(y)) => prop_assert_eq!(x, y),
            _ => prop_assert!(false, "regression outcome depends on order"),
        }
    }
}
