//! Randomized invariants.

use proptest::prelude::*;
use tbvlm_core::encoders::{patchify, unpatchify};
use tbvlm_core::metrics::{iou, precision_recall, roc_auc, roc_curve, trapezoid};
use tbvlm_core::{Tape, Tensor};

fn scores_and_labels() -> impl Strategy<Value = (Vec<f64>, Vec<u8>)> {
    (2usize..60).prop_flat_map(|n| {
        (
            // Coarse grid so ties are common.
            prop::collection::vec((0i32..20).prop_map(|v| v as f64 / 4.0), n),
            prop::collection::vec(0u8..=1, n),
        )
    })
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 100, ..ProptestConfig::default() })]

    #[test]
    fn trapezoid_equals_pair_counting((scores, labels) in scores_and_labels()) {
        prop_assume!(labels.contains(&0) && labels.contains(&1));
        let auc = roc_auc(&scores, &labels).unwrap();
        let curve = roc_curve(&scores, &labels).unwrap();
        prop_assert!((trapezoid(&curve) - auc).abs() < 1e-9);
        for w in curve.windows(2) {
            prop_assert!(w[1][0] >= w[0][0] && w[1][1] >= w[0][1]);
        }
    }

    #[test]
    fn auc_matches_brute_force((scores, labels) in scores_and_labels()) {
        prop_assume!(labels.contains(&0) && labels.contains(&1));
        let mut credit = 0.0;
        let mut pairs = 0.0;
        for (i, &si) in scores.iter().enumerate() {
            for (j, &sj) in scores.iter().enumerate() {
                if labels[i] == 1 && labels[j] == 0 {
                    pairs += 1.0;
                    credit += if si > sj { 1.0 } else if si == sj { 0.5 } else { 0.0 };
                }
            }
        }
        prop_assert!((roc_auc(&scores, &labels).unwrap() - credit / pairs).abs() < 1e-12);
    }

    #[test]
    fn recall_never_rises_with_threshold((scores, labels) in scores_and_labels(), t in 0.0f64..5.0, dt in 0.0f64..2.0) {
        let lo = precision_recall(&scores, &labels, t).unwrap();
        let hi = precision_recall(&scores, &labels, t + dt).unwrap();
        if let (Some(a), Some(b)) = (lo.recall.value(), hi.recall.value()) {
            prop_assert!(b <= a);
        }
        // Brute-force count at the lower threshold.
        let tp = scores.iter().zip(&labels).filter(|(s, l)| **s >= t && **l == 1).count();
        prop_assert_eq!(lo.counts.tp, tp);
    }

    #[test]
    fn iou_is_symmetric_and_bounded(a in prop::array::uniform4(0.0f64..1.0), b in prop::array::uniform4(0.0f64..1.0)) {
        let fix = |v: [f64; 4]| [v[0].min(v[2]), v[1].min(v[3]), v[0].max(v[2]) + 1e-3, v[1].max(v[3]) + 1e-3];
        let (a, b) = (fix(a), fix(b));
        let x = iou(a, b).unwrap();
        prop_assert!((0.0..=1.0).contains(&x));
        prop_assert!((x - iou(b, a).unwrap()).abs() < 1e-15);
        prop_assert!((iou(a, a).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn boxes_are_valid_for_any_raw_values(raw in prop::collection::vec(-50.0f64..50.0, 24)) {
        let mut tape = Tape::new();
        let r = tape.constant(Tensor::new(vec![6, 4], raw).unwrap());
        let b = tape.box_transform(r).unwrap();
        let boxes = tape.value(b);
        for i in 0..6 {
            let row = boxes.row(i);
            prop_assert!(row.iter().all(|v| (0.0..=1.0).contains(v)));
            prop_assert!(row[0] < row[2] && row[1] < row[3], "{:?}", row);
        }
    }

    #[test]
    fn softmax_is_shift_invariant(vals in prop::collection::vec(-30.0f64..30.0, 12), c in -500.0f64..500.0) {
        let x = Tensor::new(vec![3, 4], vals).unwrap();
        let y = x.map(|v| v + c);
        prop_assert!(x.softmax(1).unwrap().max_abs_diff(&y.softmax(1).unwrap()) < 1e-12);
    }

    #[test]
    fn patchify_inverts(vals in prop::collection::vec(0.0f64..1.0, 32 * 32), p in prop::sample::select(vec![4usize, 8, 16])) {
        let img = Tensor::new(vec![32, 32], vals).unwrap();
        prop_assert_eq!(unpatchify(&patchify(&img, p).unwrap(), 32, 32, p).unwrap(), img);
    }
}
