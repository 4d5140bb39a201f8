//! Detection metrics: pooled PR curves, AP in continuous and 40-point form,
//! heading-weighted APH, the oracle re-ranking bound and per-bin precision.

use std::cmp::Ordering;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::geometry::{canonical_point, viewing_angle, wrap_angle, Point};
use crate::par;
use crate::supervision::{greedy_match, iou_matrix, score_order, Detection, GroundTruth};

/// Detections and ground truth of one frame as seen by the evaluator.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalFrame {
    pub frame_id: String,
    pub detections: Vec<Detection>,
    pub ground_truth: Vec<GroundTruth>,
    /// Ground truth excluded by a difficulty filter. Detections matched to
    /// an ignored box count as neither TP nor FP. Empty means none ignored.
    pub ignore: Vec<bool>,
}

impl EvalFrame {
    pub fn new(
        frame_id: impl Into<String>,
        detections: Vec<Detection>,
        ground_truth: Vec<GroundTruth>,
    ) -> Self {
        Self {
            frame_id: frame_id.into(),
            detections,
            ground_truth,
            ignore: Vec::new(),
        }
    }

    fn ignored(&self, j: usize) -> bool {
        self.ignore.get(j).copied().unwrap_or(false)
    }
}

/// Heading accuracy in [0, 1]: 1 at equal yaw, 0 at opposite yaw.
pub fn heading_weight(a: f64, b: f64) -> f64 {
    let d = (a - b).abs() % std::f64::consts::TAU;
    let d = d.min(std::f64::consts::TAU - d);
    (1.0 - d / std::f64::consts::PI).clamp(0.0, 1.0)
}

/// One detection of a class after matching, ready for ranking.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RankedDetection {
    pub score: f64,
    pub frame: usize,
    pub index: usize,
    pub tp: bool,
    /// Heading weight of the matched ground truth, 0 for a FP.
    pub heading: f64,
}

/// Matches every frame at `iou_thr` and returns the class detections in
/// ranking order together with the number of non-ignored ground truths.
pub fn match_class(
    frames: &[EvalFrame],
    class_id: usize,
    iou_thr: f64,
) -> (Vec<RankedDetection>, usize) {
    let per_frame = par::map_range(0..frames.len(), |f| {
        let fr = &frames[f];
        let det_idx: Vec<usize> = (0..fr.detections.len())
            .filter(|&i| fr.detections[i].class_id == class_id)
            .collect();
        let gt_idx: Vec<usize> = (0..fr.ground_truth.len())
            .filter(|&j| fr.ground_truth[j].class_id == class_id)
            .collect();
        let dets: Vec<Detection> = det_idx.iter().map(|&i| fr.detections[i]).collect();
        let gts: Vec<GroundTruth> = gt_idx.iter().map(|&j| fr.ground_truth[j]).collect();
        let iou = iou_matrix(&dets, &gts);
        let order = score_order(dets.iter().map(|d| d.score));
        let matched = greedy_match(&order, &iou, &vec![iou_thr; dets.len()], gts.len());
        let mut out = Vec::with_capacity(dets.len());
        for (k, m) in matched.into_iter().enumerate() {
            let (tp, heading) = match m {
                Some(j) if fr.ignored(gt_idx[j]) => continue,
                Some(j) => (true, heading_weight(dets[k].bbox.yaw, gts[j].bbox.yaw)),
                None => (false, 0.0),
            };
            out.push(RankedDetection {
                score: dets[k].score,
                frame: f,
                index: det_idx[k],
                tp,
                heading,
            });
        }
        let n_gt = gt_idx.iter().filter(|&&j| !fr.ignored(j)).count();
        (out, n_gt)
    });
    let mut ranked = Vec::new();
    let mut num_gts = 0;
    for (r, n) in per_frame {
        ranked.extend(r);
        num_gts += n;
    }
    ranked.sort_by(|a, b| rank_cmp(a, b, frames));
    (ranked, num_gts)
}

fn rank_cmp(a: &RankedDetection, b: &RankedDetection, frames: &[EvalFrame]) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then_with(|| frames[a.frame].frame_id.cmp(&frames[b.frame].frame_id))
        .then(a.frame.cmp(&b.frame))
        .then(a.index.cmp(&b.index))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrPoint {
    pub threshold: f64,
    pub precision: f64,
    pub recall: f64,
    pub heading_precision: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrCurve {
    pub points: Vec<PrPoint>,
    pub num_gts: usize,
    /// Set when the class has no ground truth; AP is then reported as 0.
    pub no_ground_truth: bool,
}

/// Cumulative precision, recall and heading precision at every rank.
pub fn curve_from_ranked(ranked: &[RankedDetection], num_gts: usize) -> PrCurve {
    if num_gts == 0 {
        return PrCurve {
            points: Vec::new(),
            num_gts,
            no_ground_truth: true,
        };
    }
    let mut tp = 0usize;
    let mut htp = 0.0;
    let points = ranked
        .iter()
        .enumerate()
        .map(|(k, r)| {
            if r.tp {
                tp += 1;
                htp += r.heading;
            }
            let n = (k + 1) as f64;
            PrPoint {
                threshold: r.score,
                precision: tp as f64 / n,
                recall: tp as f64 / num_gts as f64,
                heading_precision: (htp / n).clamp(0.0, 1.0),
            }
        })
        .collect();
    PrCurve {
        points,
        num_gts,
        no_ground_truth: false,
    }
}

pub fn pr_curve(frames: &[EvalFrame], class_id: usize, iou_thr: f64) -> PrCurve {
    let (ranked, n) = match_class(frames, class_id, iou_thr);
    curve_from_ranked(&ranked, n)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ApMode {
    Continuous,
    R40,
}

/// AP from the precision column.
pub fn average_precision(curve: &PrCurve, mode: ApMode) -> f64 {
    area(&curve.points, mode, |p| p.precision)
}

/// APH: AP from the heading-weighted precision column.
pub fn average_precision_heading(curve: &PrCurve, mode: ApMode) -> f64 {
    area(&curve.points, mode, |p| p.heading_precision)
}

const RECALL_SLACK: f64 = 1e-12;

fn area(points: &[PrPoint], mode: ApMode, prec: impl Fn(&PrPoint) -> f64) -> f64 {
    if points.is_empty() {
        return 0.0;
    }
    // envelope[k] = max precision at rank >= k; recall never decreases with rank
    let mut envelope = vec![0.0; points.len()];
    let mut best: f64 = 0.0;
    for k in (0..points.len()).rev() {
        best = best.max(prec(&points[k]));
        envelope[k] = best;
    }
    match mode {
        ApMode::Continuous => {
            let mut prev = 0.0;
            let mut sum = 0.0;
            for (p, e) in points.iter().zip(&envelope) {
                sum += (p.recall - prev) * e;
                prev = p.recall;
            }
            sum.clamp(0.0, 1.0)
        }
        ApMode::R40 => {
            let mut sum = 0.0;
            let mut k = 0;
            for i in 1..=40 {
                let t = i as f64 / 40.0;
                while k < points.len() && points[k].recall < t - RECALL_SLACK {
                    k += 1;
                }
                if k < points.len() {
                    sum += envelope[k];
                }
            }
            sum / 40.0
        }
    }
}

/// Baseline and oracle AP. The oracle keeps the matching of the original
/// ranking but moves every TP above every FP.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OracleGap {
    pub baseline: f64,
    pub oracle: f64,
}

impl OracleGap {
    pub fn gap(&self) -> f64 {
        self.oracle - self.baseline
    }
}

pub fn oracle_gap(frames: &[EvalFrame], class_id: usize, iou_thr: f64, mode: ApMode) -> OracleGap {
    let (ranked, n) = match_class(frames, class_id, iou_thr);
    let baseline = average_precision(&curve_from_ranked(&ranked, n), mode);
    let oracle = average_precision(
        &curve_from_ranked(&oracle_ranking(&ranked, frames), n),
        mode,
    );
    OracleGap { baseline, oracle }
}

fn oracle_ranking(ranked: &[RankedDetection], frames: &[EvalFrame]) -> Vec<RankedDetection> {
    let mut o: Vec<RankedDetection> = ranked
        .iter()
        .map(|r| RankedDetection {
            score: if r.tp { 1.0 } else { 0.0 },
            ..*r
        })
        .collect();
    o.sort_by(|a, b| rank_cmp(a, b, frames));
    o
}

/// Geometric property a detection is binned by.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Conditioner {
    Length,
    ViewingAngle,
    PointCount,
    /// Mean canonical z of the in-box points.
    CanonicalZMean,
    Constant,
}

impl Conditioner {
    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "length" => Self::Length,
            "viewing-angle" => Self::ViewingAngle,
            "points" => Self::PointCount,
            "z-mean" => Self::CanonicalZMean,
            "constant" => Self::Constant,
            _ => return None,
        })
    }

    pub fn value(self, det: &Detection, points: &[Point]) -> f64 {
        match self {
            Self::Length => det.bbox.dx,
            Self::ViewingAngle => wrap_angle(viewing_angle(&det.bbox)),
            Self::PointCount => points.iter().filter(|p| det.bbox.contains(p)).count() as f64,
            Self::CanonicalZMean => {
                let (mut n, mut s) = (0usize, 0.0);
                for p in points.iter().filter(|p| det.bbox.contains(p)) {
                    n += 1;
                    s += canonical_point(p, &det.bbox)[2];
                }
                if n == 0 {
                    0.0
                } else {
                    s / n as f64
                }
            }
            Self::Constant => 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinPrecision {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
    /// Absent when no detection falls in the bin above the threshold.
    pub precision: Option<f64>,
}

/// Precision per bin `[edges[i], edges[i+1])` over detections of the class
/// scoring at least `score_thr`. `values(frame, det_index)` is the binned
/// quantity. Detections outside every bin are dropped.
pub fn conditional_precision(
    frames: &[EvalFrame],
    class_id: usize,
    iou_thr: f64,
    score_thr: f64,
    edges: &[f64],
    values: impl Fn(usize, usize) -> f64,
) -> Vec<BinPrecision> {
    let (ranked, _) = match_class(frames, class_id, iou_thr);
    let bins = edges.len().saturating_sub(1);
    let mut tp = vec![0usize; bins];
    let mut all = vec![0usize; bins];
    for r in ranked.iter().filter(|r| r.score >= score_thr) {
        let v = values(r.frame, r.index);
        if let Some(b) = (0..bins).find(|&b| v >= edges[b] && v < edges[b + 1]) {
            all[b] += 1;
            tp[b] += r.tp as usize;
        }
    }
    (0..bins)
        .map(|b| BinPrecision {
            lo: edges[b],
            hi: edges[b + 1],
            count: all[b],
            precision: (all[b] > 0).then(|| tp[b] as f64 / all[b] as f64),
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassReport {
    pub class_name: String,
    pub iou_threshold: f64,
    pub num_gts: usize,
    pub num_detections: usize,
    pub no_ground_truth: bool,
    pub ap: f64,
    pub aph: f64,
    pub ap_r40: f64,
    pub aph_r40: f64,
    pub oracle_ap: f64,
    pub oracle_ap_r40: f64,
    pub curve: Vec<PrPoint>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub classes: Vec<ClassReport>,
    pub map: f64,
    pub maph: f64,
    pub map_r40: f64,
    pub maph_r40: f64,
}

impl EvalReport {
    pub fn class(&self, name: &str) -> Option<&ClassReport> {
        self.classes.iter().find(|c| c.class_name == name)
    }

    /// mAP under the chosen mode.
    pub fn map(&self, mode: ApMode) -> f64 {
        match mode {
            ApMode::Continuous => self.map,
            ApMode::R40 => self.map_r40,
        }
    }

    pub fn table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{:<12} {:>6} {:>7} {:>7} {:>7} {:>7} {:>7} {:>9}",
            "class", "gts", "dets", "AP", "APH", "AP@R40", "APH@R40", "oracleAP"
        );
        for c in &self.classes {
            let _ = writeln!(
                s,
                "{:<12} {:>6} {:>7} {:>7.2} {:>7.2} {:>7.2} {:>7.2} {:>9.2}{}",
                c.class_name,
                c.num_gts,
                c.num_detections,
                100.0 * c.ap,
                100.0 * c.aph,
                100.0 * c.ap_r40,
                100.0 * c.aph_r40,
                100.0 * c.oracle_ap,
                if c.no_ground_truth {
                    "  (no ground truth)"
                } else {
                    ""
                }
            );
        }
        let _ = writeln!(
            s,
            "{:<12} {:>6} {:>7} {:>7.2} {:>7.2} {:>7.2} {:>7.2}",
            "mean",
            "",
            "",
            100.0 * self.map,
            100.0 * self.maph,
            100.0 * self.map_r40,
            100.0 * self.maph_r40
        );
        s
    }
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let (mut n, mut s) = (0usize, 0.0);
    for x in v {
        n += 1;
        s += x;
    }
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

/// Full report over `class_names.len()` classes with per-class thresholds.
pub fn evaluate(frames: &[EvalFrame], class_names: &[String], thresholds: &[f64]) -> EvalReport {
    let classes = par::map_range(0..class_names.len(), |c| {
        let thr = thresholds[c];
        let (ranked, n) = match_class(frames, c, thr);
        let curve = curve_from_ranked(&ranked, n);
        let oracle = curve_from_ranked(&oracle_ranking(&ranked, frames), n);
        if curve.no_ground_truth {
            log::warn!(
                "class {} has no ground truth; AP reported as 0",
                class_names[c]
            );
        }
        ClassReport {
            class_name: class_names[c].clone(),
            iou_threshold: thr,
            num_gts: n,
            num_detections: ranked.len(),
            no_ground_truth: curve.no_ground_truth,
            ap: average_precision(&curve, ApMode::Continuous),
            aph: average_precision_heading(&curve, ApMode::Continuous),
            ap_r40: average_precision(&curve, ApMode::R40),
            aph_r40: average_precision_heading(&curve, ApMode::R40),
            oracle_ap: average_precision(&oracle, ApMode::Continuous),
            oracle_ap_r40: average_precision(&oracle, ApMode::R40),
            curve: curve.points,
        }
    });
    EvalReport {
        map: mean(classes.iter().map(|c| c.ap)),
        maph: mean(classes.iter().map(|c| c.aph)),
        map_r40: mean(classes.iter().map(|c| c.ap_r40)),
        maph_r40: mean(classes.iter().map(|c| c.aph_r40)),
        classes,
    }
}

/// Marks ground truth whose in-box point count lies outside `[min, max]`.
pub fn point_count_filter(
    gts: &[GroundTruth],
    points: &[Point],
    min: Option<usize>,
    max: Option<usize>,
) -> Vec<bool> {
    gts.iter()
        .map(|g| {
            let n = points.iter().filter(|p| g.bbox.contains(p)).count();
            min.is_some_and(|m| n < m) || max.is_some_and(|m| n > m)
        })
        .collect()
}

/// `threshold,precision,recall,heading_precision` rows.
pub fn curve_csv(points: &[PrPoint]) -> String {
    let mut s = String::from("threshold,precision,recall,heading_precision\n");
    for p in points {
        let _ = writeln!(
            s,
            "{},{},{},{}",
            p.threshold, p.precision, p.recall, p.heading_precision
        );
    }
    s
}

pub fn bins_csv(bins: &[BinPrecision]) -> String {
    let mut s = String::from("lo,hi,count,precision\n");
    for b in bins {
        let p = b.precision.map(|p| p.to_string()).unwrap_or_default();
        let _ = writeln!(s, "{},{},{},{}", b.lo, b.hi, b.count, p);
    }
    s
}

/// Standalone SVG with one precision-recall polyline per named curve.
pub fn curves_svg(curves: &[(&str, &[PrPoint])]) -> String {
    const W: f64 = 480.0;
    const H: f64 = 360.0;
    const M: f64 = 40.0;
    const COLORS: [&str; 6] = [
        "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b",
    ];
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(
        s,
        r#"<rect x="{M}" y="{M}" width="{}" height="{}" fill="none" stroke="black"/>"#,
        W - 2.0 * M,
        H - 2.0 * M
    );
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" text-anchor="middle">recall</text>"#,
        W / 2.0,
        H - 8.0
    );
    let _ = writeln!(
        s,
        r#"<text x="12" y="{}" transform="rotate(-90 12 {})" text-anchor="middle">precision</text>"#,
        H / 2.0,
        H / 2.0
    );
    for (k, (name, pts)) in curves.iter().enumerate() {
        let color = COLORS[k % COLORS.len()];
        let path: Vec<String> = pts
            .iter()
            .map(|p| {
                let x = M + p.recall * (W - 2.0 * M);
                let y = H - M - p.precision * (H - 2.0 * M);
                format!("{x:.2},{y:.2}")
            })
            .collect();
        let _ = writeln!(
            s,
            r#"<polyline fill="none" stroke="{color}" points="{}"/>"#,
            path.join(" ")
        );
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" fill="{color}">{name}</text>"#,
            W - M - 100.0,
            M + 16.0 + 14.0 * k as f64
        );
    }
    s.push_str("</svg>\n");
    s
}
