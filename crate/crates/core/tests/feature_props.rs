mod common;

use std::f64::consts::PI;

use common::random_scene;
use gace::features::{
    ablation_mask, all_neighbors, extract_frame_features, FeatureGroups, NormConfig,
};
use gace::geometry::Point;
use gace::supervision::Detection;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rotate(dets: &[Detection], points: &[Point], phi: f64) -> (Vec<Detection>, Vec<Point>) {
    let (s, c) = phi.sin_cos();
    let d = dets
        .iter()
        .map(|d| Detection {
            bbox: d.bbox.rotated_about_sensor(phi),
            ..*d
        })
        .collect();
    let p = points
        .iter()
        .map(|p| {
            let (x, y) = (p.x as f64, p.y as f64);
            Point::new(
                (c * x - s * y) as f32,
                (s * x + c * y) as f32,
                p.z,
                p.intensity,
                p.elongation,
            )
        })
        .collect();
    (d, p)
}

fn groups_from(bits: u8) -> FeatureGroups {
    FeatureGroups::from_bits(bits & 0xf)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn every_entry_is_bounded(seed in any::<u64>(), radius in 2.0..80.0f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let norm = NormConfig { radius, ..NormConfig::default() };
        let (dets, points) = random_scene(&mut rng, norm.class_count);
        let f = extract_frame_features(&dets, &points, &norm);
        prop_assert_eq!(f.instance.ncols(), norm.instance_len());
        prop_assert_eq!(f.pairs.geometry.ncols(), norm.neighbor_geometry_len());
        for v in f.instance.iter().chain(f.pairs.geometry.iter()) {
            prop_assert!(v.is_finite() && (-1.0..=1.0).contains(v));
        }
    }

    #[test]
    fn rotation_about_the_sensor_keeps_relative_entries(seed in any::<u64>(), phi in -PI..PI) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let norm = NormConfig { radius: 15.0, ..NormConfig::default() };
        let (dets, points) = random_scene(&mut rng, norm.class_count);
        let (rd, rp) = rotate(&dets, &points, phi);
        let a = extract_frame_features(&dets, &points, &norm);
        let b = extract_frame_features(&rd, &rp, &norm);
        // position, heading and the pair offsets turn with the scene
        let turning = [0, 1, 6, 7];
        for (ra, rb) in a.instance.rows().into_iter().zip(b.instance.rows()) {
            for k in (0..ra.len()).filter(|k| !turning.contains(k)) {
                prop_assert!((ra[k] - rb[k]).abs() < 1e-4, "entry {}: {} vs {}", k, ra[k], rb[k]);
            }
        }
        // pairs near the radius may enter or leave under rounding
        let both = a.pairs.neighbor == b.pairs.neighbor && a.pairs.offsets == b.pairs.offsets;
        if both {
            for (ra, rb) in a.pairs.geometry.rows().into_iter().zip(b.pairs.geometry.rows()) {
                for k in (0..ra.len()).filter(|k| ![1, 2].contains(k)) {
                    prop_assert!((ra[k] - rb[k]).abs() < 1e-6);
                }
                prop_assert!((ra[1].hypot(ra[2]) - rb[1].hypot(rb[2])).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn masks_compose_by_intersection(a in any::<u8>(), b in any::<u8>()) {
        let norm = NormConfig::default();
        let (ga, gb) = (groups_from(a), groups_from(b));
        let ma = ablation_mask(ga, &norm);
        let mb = ablation_mask(gb, &norm);
        let both = ablation_mask(ga.intersect(gb), &norm);
        for k in 0..both.len() {
            prop_assert_eq!(both[k], ma[k] * mb[k]);
        }
        let all = ablation_mask(FeatureGroups::all(), &norm);
        prop_assert!(all.iter().all(|&v| v == 1.0));
        // the class one-hot survives every mask
        let none = ablation_mask(FeatureGroups::none(), &norm);
        prop_assert!(none[none.len() - norm.class_count..].iter().all(|&v| v == 1.0));
    }
}

#[test]
fn neighbor_grid_matches_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    for _ in 0..1000 {
        let (dets, _) = random_scene(&mut rng, 3);
        let r: f64 = rng.random_range(0.5..90.0);
        let lists = all_neighbors(&dets, r);
        for (i, list) in lists.iter().enumerate() {
            let a = dets[i].bbox.center();
            let brute: Vec<usize> = (0..dets.len())
                .filter(|&j| {
                    let b = dets[j].bbox.center();
                    j != i
                        && ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2))
                            .sqrt()
                            <= r
                })
                .collect();
            assert_eq!(list, &brute);
        }
    }
}
