//! Property checks over randomly generated inputs.

use std::collections::BTreeMap;

use biaslens::dataset::{compute_distribution, stratified_split, AnnotationRecord, BBox, Condition, DatasetManifest};
use biaslens::loss::ClassWeights;
use biaslens::metrics::{average_precision, iou, nds, TPErrorSet};
use biaslens::sampling::{random_oversample, AugmentOp, ResampleMode, ResamplePlan};
use proptest::prelude::*;

fn bbox() -> impl Strategy<Value = BBox> {
    (0.0..50.0f64, 0.0..50.0f64, 0.5..30.0f64, 0.5..30.0f64).prop_map(|(x, y, w, h)| BBox::new(x, y, x + w, y + h))
}

fn manifest(counts: &[usize]) -> DatasetManifest {
    let records = counts
        .iter()
        .enumerate()
        .flat_map(|(c, &n)| {
            (0..n).map(move |i| AnnotationRecord {
                sample_id: format!("c{c}-{i}"),
                class_label: format!("class{c}"),
                bbox: BBox::new(1.0, 1.0, 6.0, 6.0),
                condition: Condition::ALL[i % Condition::ALL.len()],
                image_ref: None,
                image_size: (16, 16),
            })
        })
        .collect();
    DatasetManifest::new(records, 0).unwrap()
}

proptest! {
    #[test]
    fn iou_is_symmetric_and_bounded(a in bbox(), b in bbox()) {
        let ab = iou(&a, &b).unwrap();
        prop_assert!((0.0..=1.0).contains(&ab));
        prop_assert!((ab - iou(&b, &a).unwrap()).abs() < 1e-15);
        prop_assert!((iou(&a, &a).unwrap() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn normalized_weights_sum_to_class_count(pcts in prop::collection::vec(0.01..100.0f64, 1..8)) {
        let map: BTreeMap<String, f64> = pcts.iter().enumerate().map(|(i, p)| (format!("c{i}"), *p)).collect();
        let w = ClassWeights::from_percentages(&map).unwrap();
        let sum: f64 = w.normalized.values().sum();
        prop_assert!((sum - pcts.len() as f64).abs() < 1e-9);
        // rarer classes never get smaller weights
        for (a, pa) in &map {
            for (b, pb) in &map {
                if pa < pb {
                    prop_assert!(w.get(a).unwrap() >= w.get(b).unwrap());
                }
            }
        }
    }

    #[test]
    fn ap_and_nds_stay_in_unit_interval(
        flags in prop::collection::vec(any::<bool>(), 0..40),
        extra in 0usize..5,
        map in 0.0..=1.0f64,
        tp in prop::array::uniform5(0.0..5.0f64),
    ) {
        let n_gt = flags.iter().filter(|f| **f).count() + extra;
        if n_gt > 0 {
            let ap = average_precision(&flags, n_gt).unwrap();
            prop_assert!((0.0..=1.0).contains(&ap));
        }
        let score = nds(map, &TPErrorSet::new(tp)).unwrap();
        prop_assert!((0.0..=1.0).contains(&score));
    }

    #[test]
    fn percentages_sum_to_100(counts in prop::collection::vec(1usize..200, 1..6)) {
        let d = compute_distribution(&manifest(&counts)).unwrap();
        prop_assert_eq!(d.total, counts.iter().sum::<usize>());
        prop_assert!((d.percentages.values().sum::<f64>() - 100.0).abs() < 1e-9);
    }

    #[test]
    fn split_partitions_every_class(counts in prop::collection::vec(1usize..120, 1..5), seed in any::<u64>()) {
        let m = manifest(&counts);
        let s = stratified_split(&m, 0.7, 0.15, seed).unwrap();
        let mut all: Vec<usize> = s.train.iter().chain(&s.val).chain(&s.test).copied().collect();
        all.sort_unstable();
        prop_assert_eq!(all, (0..m.len()).collect::<Vec<_>>());
    }

    #[test]
    fn oversampling_hits_targets_and_keeps_originals(
        counts in prop::collection::vec(1usize..80, 2..5),
        extra in prop::collection::vec(0usize..60, 5),
        seed in any::<u64>(),
    ) {
        let m = manifest(&counts);
        let target: BTreeMap<String, usize> =
            counts.iter().enumerate().map(|(c, n)| (format!("class{c}"), n + extra[c])).collect();
        let plan = ResamplePlan { target_counts: target.clone(), mode: ResampleMode::Oversample, seed };
        let out = random_oversample(&m, &plan).unwrap();
        prop_assert_eq!(out.class_counts(), target);
        for r in &m.records {
            prop_assert!(out.records.iter().any(|o| o.sample_id == r.sample_id));
        }
    }

    #[test]
    fn geometric_ops_round_trip_boxes(b in bbox()) {
        let size = (80.0, 80.0);
        for op in AugmentOp::GEOMETRIC {
            let (mapped, s2) = op.map_box(&b, size).unwrap();
            prop_assert!((mapped.area() - b.area()).abs() < 1e-9);
            let (back, s3) = op.inverse().map_box(&mapped, s2).unwrap();
            prop_assert_eq!(s3, size);
            for (x, y) in [(back.x1, b.x1), (back.y1, b.y1), (back.x2, b.x2), (back.y2, b.y2)] {
                prop_assert!((x - y).abs() < 1e-9);
            }
        }
    }
}
