//! Independent reference implementations used as test oracles.

use gace::eval::EvalFrame;
use gace::geometry::{iou3d, BoundingBox3D};
use gace::supervision::{Detection, GroundTruth};
use rand::Rng;

/// Footprint membership by projection onto the box axes.
pub fn in_footprint(b: &BoundingBox3D, x: f64, y: f64) -> bool {
    let (dx, dy) = (x - b.cx, y - b.cy);
    let along = dx * b.yaw.cos() + dy * b.yaw.sin();
    let across = -dx * b.yaw.sin() + dy * b.yaw.cos();
    along.abs() <= 0.5 * b.dx && across.abs() <= 0.5 * b.dy
}

/// Stratified Monte Carlo estimate of the footprint intersection area:
/// one jittered sample in each cell of an `side x side` grid over the
/// bounding rectangle of both footprints.
pub fn monte_carlo_overlap<R: Rng>(
    a: &BoundingBox3D,
    b: &BoundingBox3D,
    side: usize,
    rng: &mut R,
) -> f64 {
    let corners = |bx: &BoundingBox3D| {
        let (s, c) = bx.yaw.sin_cos();
        [(1.0, 1.0), (1.0, -1.0), (-1.0, 1.0), (-1.0, -1.0)].map(|(u, v)| {
            let (lx, ly) = (0.5 * u * bx.dx, 0.5 * v * bx.dy);
            (bx.cx + c * lx - s * ly, bx.cy + s * lx + c * ly)
        })
    };
    let pts: Vec<(f64, f64)> = corners(a).into_iter().chain(corners(b)).collect();
    let x0 = pts.iter().map(|p| p.0).fold(f64::INFINITY, f64::min);
    let x1 = pts.iter().map(|p| p.0).fold(f64::NEG_INFINITY, f64::max);
    let y0 = pts.iter().map(|p| p.1).fold(f64::INFINITY, f64::min);
    let y1 = pts.iter().map(|p| p.1).fold(f64::NEG_INFINITY, f64::max);
    let (hx, hy) = ((x1 - x0) / side as f64, (y1 - y0) / side as f64);
    let mut hits = 0u64;
    for i in 0..side {
        for j in 0..side {
            let x = x0 + (i as f64 + rng.random::<f64>()) * hx;
            let y = y0 + (j as f64 + rng.random::<f64>()) * hy;
            if in_footprint(a, x, y) && in_footprint(b, x, y) {
                hits += 1;
            }
        }
    }
    hits as f64 * hx * hy
}

/// A box of 0.3 to 1.5 m per side near the origin, any yaw.
pub fn random_small_box<R: Rng>(rng: &mut R) -> BoundingBox3D {
    BoundingBox3D::new(
        [
            rng.random_range(-0.6..0.6),
            rng.random_range(-0.6..0.6),
            0.0,
        ],
        [
            rng.random_range(0.3..1.5),
            rng.random_range(0.3..1.5),
            rng.random_range(0.3..1.5),
        ],
        rng.random_range(-3.5..3.5),
    )
    .unwrap()
}

/// Up to ten frames with up to six detections and six ground truths each.
/// Ground truths of a frame sit 10 m apart so every detection overlaps at
/// most one of them; scores come from a coarse grid so ties occur.
pub fn random_metric_instance<R: Rng>(rng: &mut R, classes: usize) -> Vec<EvalFrame> {
    let frames = rng.random_range(1..=10);
    (0..frames)
        .map(|f| {
            let n_gt = rng.random_range(0..=6);
            let gts: Vec<GroundTruth> = (0..n_gt)
                .map(|k| GroundTruth {
                    bbox: BoundingBox3D::new(
                        [10.0 * k as f64, 0.0, 0.0],
                        [rng.random_range(1.0..4.5), rng.random_range(0.8..2.0), 1.5],
                        rng.random_range(-3.0..3.0),
                    )
                    .unwrap(),
                    class_id: rng.random_range(0..classes),
                })
                .collect();
            let n_det = rng.random_range(0..=6);
            let dets: Vec<Detection> = (0..n_det)
                .map(|_| {
                    let near = (!gts.is_empty() && rng.random_bool(0.75))
                        .then(|| gts[rng.random_range(0..gts.len())]);
                    let (bbox, class_id) = match near {
                        Some(g) => {
                            let s = rng.random_range(0.0..0.6);
                            let b = g.bbox;
                            let yaw = if rng.random_bool(0.2) {
                                b.yaw + 3.0
                            } else {
                                b.yaw + rng.random_range(-0.3..0.3)
                            };
                            let class_id = if rng.random_bool(0.9) {
                                g.class_id
                            } else {
                                rng.random_range(0..classes)
                            };
                            (
                                BoundingBox3D::new(
                                    [
                                        b.cx + rng.random_range(-s..=s),
                                        b.cy + rng.random_range(-s..=s),
                                        b.cz,
                                    ],
                                    [b.dx, b.dy, b.dz],
                                    yaw,
                                )
                                .unwrap(),
                                class_id,
                            )
                        }
                        None => (
                            BoundingBox3D::new(
                                [
                                    rng.random_range(-5.0..60.0),
                                    rng.random_range(5.0..20.0),
                                    0.0,
                                ],
                                [2.0, 1.0, 1.5],
                                0.0,
                            )
                            .unwrap(),
                            rng.random_range(0..classes),
                        ),
                    };
                    Detection {
                        bbox,
                        class_id,
                        score: rng.random_range(0..=20) as f64 / 20.0,
                    }
                })
                .collect();
            // ids out of index order so the frame-id tie-break matters
            EvalFrame::new(format!("f{:02}", (7 * f + 3) % 11), dets, gts)
        })
        .collect()
}

/// One ranked entry of the reference: (tp, heading weight).
type Entry = (bool, f64);

/// Reference matching of one frame: every assignment of detections to
/// ground truth (or to nothing) is enumerated, and the one whose TP flags
/// read in score order (ties by index) are lexicographically largest wins.
fn exhaustive_frame(
    dets: &[(usize, Detection)],
    gts: &[GroundTruth],
    thr: f64,
) -> Vec<Option<usize>> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| {
        dets[b]
            .1
            .score
            .partial_cmp(&dets[a].1.score)
            .unwrap()
            .then(a.cmp(&b))
    });
    let mut best: Option<(Vec<bool>, Vec<Option<usize>>)> = None;
    let mut current = vec![None; dets.len()];
    let mut used = vec![false; gts.len()];
    #[allow(clippy::too_many_arguments)]
    fn rec(
        k: usize,
        order: &[usize],
        dets: &[(usize, Detection)],
        gts: &[GroundTruth],
        thr: f64,
        current: &mut Vec<Option<usize>>,
        used: &mut Vec<bool>,
        best: &mut Option<(Vec<bool>, Vec<Option<usize>>)>,
    ) {
        if k == order.len() {
            let flags: Vec<bool> = order.iter().map(|&i| current[i].is_some()).collect();
            if best.as_ref().is_none_or(|(f, _)| flags > *f) {
                *best = Some((flags, current.clone()));
            }
            return;
        }
        let i = order[k];
        for j in 0..gts.len() {
            if !used[j]
                && gts[j].class_id == dets[i].1.class_id
                && iou3d(&dets[i].1.bbox, &gts[j].bbox) >= thr
            {
                used[j] = true;
                current[i] = Some(j);
                rec(k + 1, order, dets, gts, thr, current, used, best);
                current[i] = None;
                used[j] = false;
            }
        }
        rec(k + 1, order, dets, gts, thr, current, used, best);
    }
    rec(
        0,
        &order,
        dets,
        gts,
        thr,
        &mut current,
        &mut used,
        &mut best,
    );
    best.map(|b| b.1).unwrap_or_default()
}

fn wrapped_heading_weight(a: f64, b: f64) -> f64 {
    let mut d = (a - b).abs();
    while d >= 2.0 * std::f64::consts::PI {
        d -= 2.0 * std::f64::consts::PI;
    }
    if d > std::f64::consts::PI {
        d = 2.0 * std::f64::consts::PI - d;
    }
    1.0 - d / std::f64::consts::PI
}

/// Reference PR points `(precision, recall, heading_precision)` in rank
/// order, or `None` when the class has no ground truth.
pub fn reference_curve(
    frames: &[EvalFrame],
    class_id: usize,
    thr: f64,
) -> Option<Vec<(f64, f64, f64)>> {
    let mut entries: Vec<(f64, &str, usize, usize, Entry)> = Vec::new();
    let mut n_gt = 0;
    for (f, fr) in frames.iter().enumerate() {
        let dets: Vec<(usize, Detection)> = fr
            .detections
            .iter()
            .copied()
            .enumerate()
            .filter(|(_, d)| d.class_id == class_id)
            .collect();
        let gts: Vec<GroundTruth> = fr
            .ground_truth
            .iter()
            .copied()
            .filter(|g| g.class_id == class_id)
            .collect();
        n_gt += gts.len();
        let m = exhaustive_frame(&dets, &gts, thr);
        for (k, (idx, d)) in dets.iter().enumerate() {
            let e = match m[k] {
                Some(j) => (true, wrapped_heading_weight(d.bbox.yaw, gts[j].bbox.yaw)),
                None => (false, 0.0),
            };
            entries.push((d.score, fr.frame_id.as_str(), f, *idx, e));
        }
    }
    if n_gt == 0 {
        return None;
    }
    entries.sort_by(|a, b| {
        b.0.partial_cmp(&a.0)
            .unwrap()
            .then(a.1.cmp(b.1))
            .then(a.2.cmp(&b.2))
            .then(a.3.cmp(&b.3))
    });
    let (mut tp, mut h) = (0usize, 0.0);
    Some(
        entries
            .iter()
            .enumerate()
            .map(|(k, e)| {
                if e.4 .0 {
                    tp += 1;
                    h += e.4 .1;
                }
                let n = (k + 1) as f64;
                (tp as f64 / n, tp as f64 / n_gt as f64, h / n)
            })
            .collect(),
    )
}

/// Area under the precision envelope: each recall increment is weighted by
/// the best precision reached at that recall or beyond.
pub fn reference_ap(curve: &[(f64, f64)]) -> f64 {
    let mut area = 0.0;
    let mut prev = 0.0;
    for (k, &(_, r)) in curve.iter().enumerate() {
        let env = curve[k..].iter().map(|p| p.0).fold(0.0, f64::max);
        area += (r - prev) * env;
        prev = r;
    }
    area
}

/// Mean over the 40 recall positions of the best precision at that recall
/// or beyond; positions never reached count as 0.
pub fn reference_ap_r40(curve: &[(f64, f64)]) -> f64 {
    let mut total = 0.0;
    for i in 1..=40 {
        let t = i as f64 / 40.0;
        total += curve
            .iter()
            .filter(|p| p.1 >= t - 1e-12)
            .map(|p| p.0)
            .fold(0.0, f64::max);
    }
    total / 40.0
}
