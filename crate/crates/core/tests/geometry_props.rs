mod common;

use std::f64::consts::{FRAC_PI_4, PI};

use common::oracles::{in_footprint, monte_carlo_overlap, random_small_box};
use gace::geometry::{
    angle_encode, bev_overlap_area, canonicalize, iou3d, point_statistics, viewing_angle,
    BoundingBox3D, ChannelSet, Point,
};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn bx(c: [f64; 3], d: [f64; 3], yaw: f64) -> BoundingBox3D {
    BoundingBox3D::new(c, d, yaw).unwrap()
}

fn arb_box(span: f64) -> impl Strategy<Value = BoundingBox3D> {
    (
        -span..span,
        -span..span,
        -2.0..2.0f64,
        0.3..6.0f64,
        0.3..3.0f64,
        0.3..3.0f64,
        -PI..PI,
    )
        .prop_map(|(x, y, z, dx, dy, dz, yaw)| bx([x, y, z], [dx, dy, dz], yaw))
}

/// Applies a rotation about z by `phi` then a translation to a point.
fn move_point(p: &Point, phi: f64, t: [f64; 3]) -> Point {
    let (s, c) = phi.sin_cos();
    let (x, y) = (p.x as f64, p.y as f64);
    Point::new(
        (c * x - s * y + t[0]) as f32,
        (s * x + c * y + t[1]) as f32,
        (p.z as f64 + t[2]) as f32,
        p.intensity,
        p.elongation,
    )
}

fn move_box(b: &BoundingBox3D, phi: f64, t: [f64; 3]) -> BoundingBox3D {
    b.rotated_about_sensor(phi).translated(t)
}

#[test]
fn overlap_matches_monte_carlo_on_random_pairs() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let a = random_small_box(&mut rng);
        let b = random_small_box(&mut rng);
        let mc = monte_carlo_overlap(&a, &b, 1000, &mut rng);
        worst = worst.max((mc - bev_overlap_area(&a, &b)).abs());
    }
    assert!(worst < 2e-3, "worst deviation {worst}");
}

#[test]
#[allow(clippy::approx_constant)]
fn analytic_iou_cases() {
    let unit = bx([0.0; 3], [1.0; 3], 0.0);
    let shifted = bx([0.5, 0.0, 0.0], [1.0; 3], 0.0);
    assert!((iou3d(&unit, &shifted) - 1.0 / 3.0).abs() < 1e-12);
    let turned = bx([0.0; 3], [1.0; 3], FRAC_PI_4);
    let octagon = 2.0 * (2f64.sqrt() - 1.0);
    assert!((bev_overlap_area(&unit, &turned) - octagon).abs() < 1e-12);
    assert!((iou3d(&unit, &turned) - octagon / (2.0 - octagon)).abs() < 1e-12);
    assert!((iou3d(&unit, &turned) - 0.70711).abs() < 1e-4);
    let above = bx([0.0, 0.0, 1.5], [1.0; 3], 0.0);
    assert_eq!(iou3d(&unit, &above), 0.0);
}

#[test]
fn offset_boxes_along_each_axis() {
    // two 2x1x1 boxes shifted by `s` along x overlap (2 - s) x 1 x 1
    for s in [0.25, 0.5, 1.0, 1.5] {
        let a = bx([0.0; 3], [2.0, 1.0, 1.0], 0.0);
        let b = bx([s, 0.0, 0.0], [2.0, 1.0, 1.0], 0.0);
        let inter = 2.0 - s;
        assert!((iou3d(&a, &b) - inter / (4.0 - inter)).abs() < 1e-12);
    }
    // shift along z only
    let a = bx([0.0; 3], [1.0; 3], 0.3);
    let b = bx([0.0, 0.0, 0.25], [1.0; 3], 0.3);
    assert!((iou3d(&a, &b) - 0.75 / 1.25).abs() < 1e-12);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn iou_is_symmetric_bounded_and_reflexive(a in arb_box(4.0), b in arb_box(4.0)) {
        let ab = iou3d(&a, &b);
        prop_assert_eq!(ab.to_bits(), iou3d(&b, &a).to_bits());
        prop_assert!((0.0..=1.0).contains(&ab));
        prop_assert!((iou3d(&a, &a) - 1.0).abs() < 1e-9);
        prop_assert_eq!(bev_overlap_area(&a, &b).to_bits(), bev_overlap_area(&b, &a).to_bits());
    }

    #[test]
    fn overlap_is_bounded_by_either_footprint(a in arb_box(3.0), b in arb_box(3.0)) {
        let o = bev_overlap_area(&a, &b);
        prop_assert!(o >= 0.0);
        prop_assert!(o <= a.dx * a.dy + 1e-9 && o <= b.dx * b.dy + 1e-9);
    }

    #[test]
    fn containment_commutes_with_rigid_motion(
        b in arb_box(8.0),
        raw in prop::collection::vec((-1.0..1.0f64, -1.0..1.0f64, -1.0..1.0f64), 1..60),
        phi in -PI..PI,
        t in (-20.0..20.0f64, -20.0..20.0f64, -1.0..1.0f64),
    ) {
        let t = [t.0, t.1, t.2];
        let (s, c) = b.yaw.sin_cos();
        let b2 = move_box(&b, phi, t);
        for (u, v, w) in raw {
            // local offsets scaled to the box, then placed in the sensor frame
            let (lx, ly, lz) = (0.7 * u * b.dx, 0.7 * v * b.dy, 0.7 * w * b.dz);
            let p = Point::new(
                (b.cx + c * lx - s * ly) as f32,
                (b.cy + s * lx + c * ly) as f32,
                (b.cz + lz) as f32,
                0.5,
                0.5,
            );
            let l = b.to_local(p.x as f64, p.y as f64, p.z as f64);
            let margin = [0.5 * b.dx - l[0].abs(), 0.5 * b.dy - l[1].abs(), 0.5 * b.dz - l[2].abs()];
            prop_assume!(margin.iter().all(|m| m.abs() > 1e-4));
            prop_assert_eq!(b.contains(&p), b2.contains(&move_point(&p, phi, t)));
        }
    }

    #[test]
    fn statistics_survive_rigid_motion(
        b in arb_box(6.0).prop_filter("boxes of at least 1 m", |b| b.dx >= 1.0 && b.dy >= 1.0 && b.dz >= 1.0),
        raw in prop::collection::vec((-0.5..0.5f64, -0.5..0.5f64, -0.5..0.5f64, 0.0..1.0f32), 0..40),
        phi in -PI..PI,
        t in (-4.0..4.0f64, -4.0..4.0f64, -1.0..1.0f64),
    ) {
        let t = [t.0, t.1, t.2];
        let (s, c) = b.yaw.sin_cos();
        let pts: Vec<Point> = raw
            .iter()
            .map(|&(u, v, w, i)| {
                let (lx, ly) = (u * b.dx, v * b.dy);
                Point::new((b.cx + c * lx - s * ly) as f32, (b.cy + s * lx + c * ly) as f32, (b.cz + w * b.dz) as f32, i, 1.0 - i)
            })
            .collect();
        let moved: Vec<Point> = pts.iter().map(|p| move_point(p, phi, t)).collect();
        let b2 = move_box(&b, phi, t);
        let s1 = point_statistics(&canonicalize(&pts, &b), ChannelSet::all());
        let s2 = point_statistics(&canonicalize(&moved, &b2), ChannelSet::all());
        prop_assert_eq!(s1.point_count, s2.point_count);
        for (x, y) in [(&s1.mean, &s2.mean), (&s1.std, &s2.std), (&s1.min, &s2.min), (&s1.max, &s2.max)] {
            for (p, q) in x.iter().zip(y.iter()) {
                prop_assert!((p - q).abs() < 1e-6, "{} vs {}", p, q);
            }
        }
        for k in 0..5 {
            prop_assert!(s1.min[k] <= s1.mean[k] + 1e-12 && s1.mean[k] <= s1.max[k] + 1e-12);
            prop_assert!(s1.std[k] >= 0.0);
        }
    }

    #[test]
    fn viewing_angle_is_rotation_invariant(b in arb_box(50.0), phi in -PI..PI) {
        prop_assume!(b.cx.hypot(b.cy) > 1e-3);
        let d = viewing_angle(&b) - viewing_angle(&b.rotated_about_sensor(phi));
        let d = d.sin().atan2(d.cos());
        prop_assert!(d.abs() < 1e-9);
    }

    #[test]
    fn yaw_is_normalized_and_encoding_periodic(yaw in -20.0..20.0f64) {
        let b = bx([1.0, 2.0, 0.0], [1.0; 3], yaw);
        prop_assert!(b.yaw > -PI && b.yaw <= PI);
        let (c1, s1) = angle_encode(yaw);
        let (c2, s2) = angle_encode(yaw + 2.0 * PI);
        prop_assert!((c1 - c2).abs() < 1e-9 && (s1 - s2).abs() < 1e-9);
    }

    #[test]
    fn footprint_oracle_agrees_with_containment(b in arb_box(5.0), x in -8.0..8.0f64, y in -8.0..8.0f64) {
        let l = b.to_local(x, y, b.cz);
        prop_assume!((0.5 * b.dx - l[0].abs()).abs() > 1e-9 && (0.5 * b.dy - l[1].abs()).abs() > 1e-9);
        let p = Point::new(x as f32, y as f32, b.cz as f32, 0.0, 0.0);
        let l32 = b.to_local(p.x as f64, p.y as f64, p.z as f64);
        prop_assume!((0.5 * b.dx - l32[0].abs()).abs() > 1e-5 && (0.5 * b.dy - l32[1].abs()).abs() > 1e-5);
        prop_assert_eq!(in_footprint(&b, p.x as f64, p.y as f64), b.contains(&p));
    }
}
