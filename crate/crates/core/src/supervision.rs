//! Training targets for detections: the TP/FP label `u` and the IoU target `v`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{iou3d, BoundingBox3D};

/// A box proposed by the black-box detector.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub bbox: BoundingBox3D,
    pub class_id: usize,
    pub score: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub bbox: BoundingBox3D,
    pub class_id: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LabeledDetection {
    pub detection: Detection,
    /// True positive under one-to-one matching.
    pub u: bool,
    /// Best same-class 3D IoU with any ground truth box.
    pub v: f64,
}

#[derive(Debug, Error, PartialEq)]
pub enum LabelError {
    #[error("no IoU threshold configured for class {0}")]
    MissingThreshold(usize),
}

/// Per-class IoU threshold for a true positive.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassThresholds(pub Vec<f64>);

impl ClassThresholds {
    pub fn get(&self, class_id: usize) -> Option<f64> {
        self.0.get(class_id).copied()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl Default for ClassThresholds {
    /// 0.7 for the vehicle-like class 0, 0.5 for pedestrians and cyclists.
    fn default() -> Self {
        Self(vec![0.7, 0.5, 0.5])
    }
}

/// Indices of `scores` sorted by score descending, ties by index.
pub fn score_order(scores: impl IntoIterator<Item = f64>) -> Vec<usize> {
    let s: Vec<f64> = scores.into_iter().collect();
    let mut order: Vec<usize> = (0..s.len()).collect();
    order.sort_by(|&a, &b| s[b].total_cmp(&s[a]).then(a.cmp(&b)));
    order
}

/// Greedy one-to-one matching inside one frame.
///
/// Detections are visited in score order (ties by index); each takes the
/// still-unmatched same-class ground truth with the highest IoU, provided that
/// IoU reaches the detection class threshold. Returns, per detection in input
/// order, the matched ground-truth index.
///
/// `iou[i][j]` is the IoU of detection `i` and ground truth `j` (0 when the
/// classes differ).
pub fn greedy_match(
    order: &[usize],
    iou: &[Vec<f64>],
    thresholds: &[f64],
    num_gts: usize,
) -> Vec<Option<usize>> {
    let mut taken = vec![false; num_gts];
    let mut matched = vec![None; iou.len()];
    for &i in order {
        let mut best: Option<(usize, f64)> = None;
        for (j, &o) in iou[i].iter().enumerate() {
            if taken[j] || o <= 0.0 {
                continue;
            }
            if best.is_none_or(|(_, bo)| o > bo) {
                best = Some((j, o));
            }
        }
        if let Some((j, o)) = best {
            if o >= thresholds[i] {
                taken[j] = true;
                matched[i] = Some(j);
            }
        }
    }
    matched
}

/// Same-class IoU matrix, detections by ground truths.
pub fn iou_matrix(dets: &[Detection], gts: &[GroundTruth]) -> Vec<Vec<f64>> {
    dets.iter()
        .map(|d| {
            gts.iter()
                .map(|g| {
                    if g.class_id == d.class_id {
                        iou3d(&d.bbox, &g.bbox)
                    } else {
                        0.0
                    }
                })
                .collect()
        })
        .collect()
}

/// Attach `u` and `v` to every detection of one frame. Output order equals
/// input order.
pub fn assign_labels(
    dets: &[Detection],
    gts: &[GroundTruth],
    thresholds: &ClassThresholds,
) -> Result<Vec<LabeledDetection>, LabelError> {
    let thr = dets
        .iter()
        .map(|d| {
            thresholds
                .get(d.class_id)
                .ok_or(LabelError::MissingThreshold(d.class_id))
        })
        .collect::<Result<Vec<_>, _>>()?;
    let iou = iou_matrix(dets, gts);
    let order = score_order(dets.iter().map(|d| d.score));
    let matched = greedy_match(&order, &iou, &thr, gts.len());
    Ok(dets
        .iter()
        .zip(&iou)
        .zip(matched)
        .map(|((d, row), m)| LabeledDetection {
            detection: *d,
            u: m.is_some(),
            v: row.iter().copied().fold(0.0, f64::max).clamp(0.0, 1.0),
        })
        .collect())
}
