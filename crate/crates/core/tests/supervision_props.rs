use gace::geometry::{iou3d, BoundingBox3D};
use gace::supervision::{
    assign_labels, greedy_match, iou_matrix, score_order, ClassThresholds, Detection, GroundTruth,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Up to five ground truths and five detections packed into a few meters,
/// so that many pairs overlap and compete.
fn crowded(seed: u64) -> (Vec<Detection>, Vec<GroundTruth>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let boxed = |rng: &mut ChaCha8Rng| {
        BoundingBox3D::new(
            [
                rng.random_range(-1.5..1.5),
                rng.random_range(-1.0..1.0),
                rng.random_range(-0.2..0.2),
            ],
            [rng.random_range(1.5..2.5), rng.random_range(0.8..1.4), 1.5],
            rng.random_range(-0.4..0.4),
        )
        .unwrap()
    };
    let gts = (0..rng.random_range(0..=5))
        .map(|_| GroundTruth {
            bbox: boxed(&mut rng),
            class_id: rng.random_range(0..2),
        })
        .collect();
    let dets = (0..rng.random_range(0..=5))
        .map(|_| Detection {
            bbox: boxed(&mut rng),
            class_id: rng.random_range(0..2),
            score: rng.random_range(0..10) as f64 / 10.0,
        })
        .collect();
    (dets, gts)
}

/// Largest one-to-one set of same-class pairs at or above the threshold,
/// by enumeration.
fn max_cardinality(dets: &[Detection], gts: &[GroundTruth], thr: &[f64]) -> usize {
    fn rec(
        i: usize,
        dets: &[Detection],
        gts: &[GroundTruth],
        thr: &[f64],
        used: &mut Vec<bool>,
    ) -> usize {
        if i == dets.len() {
            return 0;
        }
        let mut best = rec(i + 1, dets, gts, thr, used);
        for j in 0..gts.len() {
            if !used[j]
                && gts[j].class_id == dets[i].class_id
                && iou3d(&dets[i].bbox, &gts[j].bbox) >= thr[i]
            {
                used[j] = true;
                best = best.max(1 + rec(i + 1, dets, gts, thr, used));
                used[j] = false;
            }
        }
        best
    }
    rec(0, dets, gts, thr, &mut vec![false; gts.len()])
}

const THR: [f64; 2] = [0.5, 0.3];

proptest! {
    #![proptest_config(ProptestConfig::with_cases(500))]

    #[test]
    fn matching_is_the_greedy_assignment(seed in any::<u64>()) {
        let (dets, gts) = crowded(seed);
        let thr: Vec<f64> = dets.iter().map(|d| THR[d.class_id]).collect();
        let iou = iou_matrix(&dets, &gts);
        let order = score_order(dets.iter().map(|d| d.score));
        let m = greedy_match(&order, &iou, &thr, gts.len());

        let mut taken = vec![false; gts.len()];
        for &i in &order {
            let free_best = (0..gts.len())
                .filter(|&j| !taken[j])
                .map(|j| iou[i][j])
                .fold(0.0, f64::max);
            match m[i] {
                Some(j) => {
                    prop_assert!(!taken[j]);
                    prop_assert_eq!(gts[j].class_id, dets[i].class_id);
                    prop_assert!(iou[i][j] >= thr[i]);
                    prop_assert_eq!(iou[i][j], free_best);
                    taken[j] = true;
                }
                None => prop_assert!(free_best < thr[i]),
            }
        }
        let tp = m.iter().flatten().count();
        prop_assert!(tp <= dets.len().min(gts.len()));
        prop_assert!(tp <= max_cardinality(&dets, &gts, &thr));
    }

    #[test]
    fn labels_follow_detection_permutations(seed in any::<u64>()) {
        let (mut dets, gts) = crowded(seed);
        // distinct scores so the visiting order does not depend on position
        for (k, d) in dets.iter_mut().enumerate() {
            d.score = (d.score + 0.01 * k as f64).min(1.0);
        }
        let thr = ClassThresholds(THR.to_vec());
        let base = assign_labels(&dets, &gts, &thr).unwrap();
        let rev: Vec<Detection> = dets.iter().rev().copied().collect();
        let other = assign_labels(&rev, &gts, &thr).unwrap();
        for (a, b) in base.iter().zip(other.iter().rev()) {
            prop_assert_eq!(a.u, b.u);
            prop_assert_eq!(a.v, b.v);
        }
        for (l, row) in base.iter().zip(iou_matrix(&dets, &gts)) {
            prop_assert_eq!(l.v, row.iter().copied().fold(0.0, f64::max));
            prop_assert!(!l.u || l.v >= THR[l.detection.class_id]);
        }
    }

    #[test]
    fn raising_a_threshold_never_adds_positives(seed in any::<u64>(), bump in 0.0..0.5f64) {
        let (dets, gts) = crowded(seed);
        // a lone detection per ground truth cannot be blocked by others
        let lone: Vec<Detection> = dets.into_iter().take(1).collect();
        let low = assign_labels(&lone, &gts, &ClassThresholds(THR.to_vec())).unwrap();
        let high = assign_labels(&lone, &gts, &ClassThresholds(THR.iter().map(|t| t + bump).collect())).unwrap();
        for (a, b) in low.iter().zip(&high) {
            prop_assert!(a.u || !b.u);
        }
    }
}

#[test]
fn class_without_threshold_is_an_error() {
    let d = Detection {
        bbox: BoundingBox3D::new([0.0; 3], [1.0; 3], 0.0).unwrap(),
        class_id: 4,
        score: 0.5,
    };
    assert!(assign_labels(&[d], &[], &ClassThresholds::default()).is_err());
}
