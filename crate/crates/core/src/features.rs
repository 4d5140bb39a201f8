//! Raw network inputs: the per-detection instance vector and the
//! per-neighbor relational vector, with metric normalization.
//!
//! Instance vector layout (length `13 + 4 * |channels| + class_count`):
//!
//! | index | entry |
//! |-------|-------|
//! | 0, 1  | `cx / max_range`, `cy / max_range` |
//! | 2     | `(cz - z_lo) / (z_hi - z_lo)` |
//! | 3..6  | extents over `max_dims` |
//! | 6, 7  | `cos yaw`, `sin yaw` |
//! | 8     | detector score |
//! | 9, 10 | `cos`, `sin` of the viewing angle |
//! | 11    | range over `max_range` |
//! | 12    | `min(points, max_points) / max_points` |
//! | 13..  | canonical point statistics: mean, std, min, max per channel |
//! | tail  | class one-hot |
//!
//! Every entry is clamped to `[-1, 1]`.

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::geometry::{
    angle_encode, canonical_point, viewing_angle, wrap_angle, BoxFrame, ChannelSet, Point,
    PointStats, StatChannel, StatsAccumulator,
};
use crate::spatial::{CenterGrid, PointGrid};
use crate::supervision::Detection;

/// Fixed entries before the statistics block.
pub const INSTANCE_HEAD: usize = 13;
/// Geometric entries of a neighbor vector before the class one-hot.
pub const NEIGHBOR_HEAD: usize = 6;

/// Normalization ranges and feature geometry. Serialized into model files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormConfig {
    pub max_range: f64,
    pub z_range: [f64; 2],
    pub max_dims: [f64; 3],
    pub max_points: u32,
    pub radius: f64,
    pub class_count: usize,
    pub stats_channels: ChannelSet,
    pub use_elongation: bool,
}

impl Default for NormConfig {
    fn default() -> Self {
        Self {
            max_range: 80.0,
            z_range: [-3.0, 8.0],
            max_dims: [25.0, 5.0, 8.0],
            max_points: 4096,
            radius: 40.0,
            class_count: 3,
            stats_channels: ChannelSet::all(),
            use_elongation: true,
        }
    }
}

#[derive(Debug, thiserror::Error, PartialEq)]
#[error("invalid normalization config: {0}")]
pub struct NormConfigError(pub &'static str);

impl NormConfig {
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    pub fn validate(&self) -> Result<(), NormConfigError> {
        if !(self.max_range > 0.0 && self.max_range.is_finite()) {
            return Err(NormConfigError("max_range must be positive"));
        }
        if !(self.z_range[1] > self.z_range[0]) {
            return Err(NormConfigError("z_range must be increasing"));
        }
        if !self.max_dims.iter().all(|d| *d > 0.0 && d.is_finite()) {
            return Err(NormConfigError("max_dims must be positive"));
        }
        if self.max_points == 0 {
            return Err(NormConfigError("max_points must be positive"));
        }
        if !(self.radius > 0.0 && self.radius.is_finite()) {
            return Err(NormConfigError("radius must be positive"));
        }
        if self.class_count == 0 {
            return Err(NormConfigError("class_count must be positive"));
        }
        Ok(())
    }

    /// Channels statistics are taken over, after applying `use_elongation`.
    pub fn channels(&self) -> ChannelSet {
        if self.use_elongation {
            self.stats_channels
        } else {
            self.stats_channels.without(StatChannel::Elongation)
        }
    }

    pub fn instance_len(&self) -> usize {
        INSTANCE_HEAD + 4 * self.channels().len() + self.class_count
    }

    pub fn neighbor_geometry_len(&self) -> usize {
        NEIGHBOR_HEAD + self.class_count
    }

    /// Stable digest of every field; keys feature caches.
    pub fn digest(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        h.update(self.max_range.to_le_bytes());
        h.update(self.z_range[0].to_le_bytes());
        h.update(self.z_range[1].to_le_bytes());
        for d in self.max_dims {
            h.update(d.to_le_bytes());
        }
        h.update(self.max_points.to_le_bytes());
        h.update(self.radius.to_le_bytes());
        h.update((self.class_count as u64).to_le_bytes());
        h.update([self.stats_channels.bits(), self.use_elongation as u8]);
        h.finalize().into()
    }
}

/// Instance feature groups that can be switched off for ablations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureGroups {
    /// Box parameters, detector score and range.
    pub box_properties: bool,
    pub num_points: bool,
    pub viewing_angle: bool,
    pub point_statistics: bool,
}

impl Default for FeatureGroups {
    fn default() -> Self {
        Self::all()
    }
}

impl FeatureGroups {
    pub fn all() -> Self {
        Self {
            box_properties: true,
            num_points: true,
            viewing_angle: true,
            point_statistics: true,
        }
    }

    pub fn none() -> Self {
        Self {
            box_properties: false,
            num_points: false,
            viewing_angle: false,
            point_statistics: false,
        }
    }

    pub fn intersect(self, o: Self) -> Self {
        Self {
            box_properties: self.box_properties && o.box_properties,
            num_points: self.num_points && o.num_points,
            viewing_angle: self.viewing_angle && o.viewing_angle,
            point_statistics: self.point_statistics && o.point_statistics,
        }
    }

    pub fn bits(self) -> u8 {
        (self.box_properties as u8)
            | (self.num_points as u8) << 1
            | (self.viewing_angle as u8) << 2
            | (self.point_statistics as u8) << 3
    }

    pub fn from_bits(b: u8) -> Self {
        Self {
            box_properties: b & 1 != 0,
            num_points: b & 2 != 0,
            viewing_angle: b & 4 != 0,
            point_statistics: b & 8 != 0,
        }
    }

    /// Parses a comma-separated group list (`box,points,angle,stats`).
    pub fn parse_list(s: &str) -> Result<Self, String> {
        let mut g = Self::none();
        for name in s.split(',').map(str::trim).filter(|n| !n.is_empty()) {
            match name {
                "box" | "box-properties" => g.box_properties = true,
                "points" | "num-points" => g.num_points = true,
                "angle" | "viewing-angle" => g.viewing_angle = true,
                "stats" | "point-statistics" => g.point_statistics = true,
                other => return Err(format!("unknown feature group '{other}'")),
            }
        }
        Ok(g)
    }
}

/// Multiplicative 0/1 mask over the instance vector. The class one-hot is
/// never masked.
pub fn ablation_mask(groups: FeatureGroups, cfg: &NormConfig) -> Vec<f64> {
    let len = cfg.instance_len();
    let stats_end = INSTANCE_HEAD + 4 * cfg.channels().len();
    (0..len)
        .map(|i| {
            let on = match i {
                0..=8 | 11 => groups.box_properties,
                9 | 10 => groups.viewing_angle,
                12 => groups.num_points,
                i if i < stats_end => groups.point_statistics,
                _ => true,
            };
            if on {
                1.0
            } else {
                0.0
            }
        })
        .collect()
}

#[inline]
fn clamp1(v: f64) -> f64 {
    if v.is_nan() {
        0.0
    } else {
        v.clamp(-1.0, 1.0)
    }
}

/// Canonical statistics of the points inside a detection box.
pub fn box_statistics(det: &Detection, points: &[Point], cfg: &NormConfig) -> PointStats {
    let mut acc = StatsAccumulator::new(cfg.channels());
    for p in points {
        acc.push(&canonical_point(p, &det.bbox));
    }
    acc.finish()
}

/// Instance vector for a detection given the points inside its box.
pub fn instance_input(det: &Detection, points: &[Point], cfg: &NormConfig) -> Vec<f64> {
    instance_input_from_stats(det, &box_statistics(det, points, cfg), cfg)
}

pub fn instance_input_from_stats(
    det: &Detection,
    stats: &PointStats,
    cfg: &NormConfig,
) -> Vec<f64> {
    let b = &det.bbox;
    let mut v = Vec::with_capacity(cfg.instance_len());
    let (cy, sy) = angle_encode(b.yaw);
    let (ca, sa) = angle_encode(viewing_angle(b));
    v.extend_from_slice(&[
        b.cx / cfg.max_range,
        b.cy / cfg.max_range,
        (b.cz - cfg.z_range[0]) / (cfg.z_range[1] - cfg.z_range[0]),
        b.dx / cfg.max_dims[0],
        b.dy / cfg.max_dims[1],
        b.dz / cfg.max_dims[2],
        cy,
        sy,
        det.score,
        ca,
        sa,
        b.range() / cfg.max_range,
        stats.point_count.min(cfg.max_points as usize) as f64 / cfg.max_points as f64,
    ]);
    stats.flatten_into(&mut v);
    for k in 0..cfg.class_count {
        v.push(if k == det.class_id { 1.0 } else { 0.0 });
    }
    for x in v.iter_mut() {
        *x = clamp1(*x);
    }
    v
}

/// Detections within `r` (closed, 3D distance) of `subject`, ascending,
/// excluding the subject.
pub fn radius_neighbors(dets: &[Detection], subject: usize, r: f64) -> Vec<usize> {
    let centers: Vec<[f64; 3]> = dets.iter().map(|d| d.bbox.center()).collect();
    CenterGrid::build(&centers, r).within(&centers, subject, r)
}

/// Neighbor lists of every detection in a frame.
pub fn all_neighbors(dets: &[Detection], r: f64) -> Vec<Vec<usize>> {
    let centers: Vec<[f64; 3]> = dets.iter().map(|d| d.bbox.center()).collect();
    let grid = CenterGrid::build(&centers, r);
    (0..dets.len())
        .map(|i| grid.within(&centers, i, r))
        .collect()
}

/// Relational entries of a neighbor vector: distance, direction, relative
/// heading and the neighbor class one-hot.
pub fn neighbor_geometry(
    subject: &Detection,
    neighbor: &Detection,
    cfg: &NormConfig,
    out: &mut Vec<f64>,
) {
    let a = subject.bbox.center();
    let b = neighbor.bbox.center();
    let d = [a[0] - b[0], a[1] - b[1], a[2] - b[2]];
    let dist = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
    let (c, s) = angle_encode(wrap_angle(subject.bbox.yaw - neighbor.bbox.yaw));
    let r = cfg.radius;
    out.extend_from_slice(&[
        clamp1(dist / r),
        clamp1(d[0] / r),
        clamp1(d[1] / r),
        clamp1(d[2] / r),
        c,
        s,
    ]);
    for k in 0..cfg.class_count {
        out.push(if k == neighbor.class_id { 1.0 } else { 0.0 });
    }
}

/// Full neighbor vector: relational entries followed by the neighbor's
/// instance embedding.
pub fn neighbor_input(
    subject: &Detection,
    neighbor: &Detection,
    f_i_n: &[f64],
    cfg: &NormConfig,
) -> Vec<f64> {
    let mut v = Vec::with_capacity(cfg.neighbor_geometry_len() + f_i_n.len());
    neighbor_geometry(subject, neighbor, cfg, &mut v);
    v.extend_from_slice(f_i_n);
    v
}

/// Subject/neighbor pairs of a frame in CSR layout: the pairs of subject `i`
/// are `offsets[i]..offsets[i + 1]`, ordered by ascending neighbor index.
#[derive(Debug, Clone, PartialEq)]
pub struct PairSet {
    pub offsets: Vec<u32>,
    pub neighbor: Vec<u32>,
    /// One row of relational entries per pair.
    pub geometry: Array2<f64>,
}

impl PairSet {
    pub fn len(&self) -> usize {
        self.neighbor.len()
    }

    pub fn is_empty(&self) -> bool {
        self.neighbor.is_empty()
    }

    pub fn subjects(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn range(&self, subject: usize) -> std::ops::Range<usize> {
        self.offsets[subject] as usize..self.offsets[subject + 1] as usize
    }

    pub fn from_lists(dets: &[Detection], lists: &[Vec<usize>], cfg: &NormConfig) -> Self {
        let g = cfg.neighbor_geometry_len();
        let total: usize = lists.iter().map(Vec::len).sum();
        let mut offsets = Vec::with_capacity(dets.len() + 1);
        let mut neighbor = Vec::with_capacity(total);
        let mut flat = Vec::with_capacity(total * g);
        offsets.push(0u32);
        for (i, list) in lists.iter().enumerate() {
            for &j in list {
                neighbor.push(j as u32);
                neighbor_geometry(&dets[i], &dets[j], cfg, &mut flat);
            }
            offsets.push(neighbor.len() as u32);
        }
        let geometry = Array2::from_shape_vec((total, g), flat).expect("pair geometry shape");
        Self {
            offsets,
            neighbor,
            geometry,
        }
    }
}

/// Everything the network consumes for one frame.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameFeatures {
    /// One unmasked instance vector per detection.
    pub instance: Array2<f64>,
    pub pairs: PairSet,
}

impl FrameFeatures {
    pub fn len(&self) -> usize {
        self.instance.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.instance.nrows() == 0
    }
}

/// Cell size of the per-frame point grid.
pub const POINT_CELL: f64 = 2.0;

/// Indices of the points inside each detection box.
pub fn points_in_boxes(points: &[Point], dets: &[Detection]) -> Vec<Vec<u32>> {
    let grid = PointGrid::build(points, POINT_CELL);
    dets.iter()
        .map(|d| grid.points_in_box(points, &d.bbox))
        .collect()
}

/// Instance matrix from precomputed in-box indices.
pub fn instance_matrix(
    dets: &[Detection],
    points: &[Point],
    inside: &[Vec<u32>],
    cfg: &NormConfig,
) -> Array2<f64> {
    let len = cfg.instance_len();
    let mut flat = Vec::with_capacity(dets.len() * len);
    for (det, idx) in dets.iter().zip(inside) {
        let frame = BoxFrame::new(&det.bbox);
        let mut acc = StatsAccumulator::new(cfg.channels());
        for &i in idx {
            acc.push(&frame.canonical(&points[i as usize]));
        }
        flat.extend(instance_input_from_stats(det, &acc.finish(), cfg));
    }
    Array2::from_shape_vec((dets.len(), len), flat).expect("instance shape")
}

/// Extracts instance vectors and neighbor pairs for one frame.
pub fn extract_frame_features(
    dets: &[Detection],
    points: &[Point],
    cfg: &NormConfig,
) -> FrameFeatures {
    let inside = points_in_boxes(points, dets);
    let instance = instance_matrix(dets, points, &inside, cfg);
    let lists = all_neighbors(dets, cfg.radius);
    FrameFeatures {
        instance,
        pairs: PairSet::from_lists(dets, &lists, cfg),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::BoundingBox3D;

    fn det(c: [f64; 3], yaw: f64, class_id: usize, score: f64) -> Detection {
        Detection {
            bbox: BoundingBox3D::new(c, [4.0, 2.0, 1.5], yaw).unwrap(),
            class_id,
            score,
        }
    }

    #[test]
    fn layout_of_an_empty_box() {
        let cfg = NormConfig::default();
        let v = instance_input(&det([10.0, 0.0, 0.0], 0.0, 0, 0.9), &[], &cfg);
        assert_eq!(v.len(), 13 + 20 + 3);
        assert_eq!(v.len(), cfg.instance_len());
        assert_eq!(v[0], 0.125);
        assert_eq!(v[1], 0.0);
        assert!((v[2] - 3.0 / 11.0).abs() < 1e-15);
        assert_eq!(v[8], 0.9);
        assert_eq!(v[12], 0.0);
        assert!(v[13..33].iter().all(|x| *x == 0.0));
        assert_eq!(&v[33..], &[1.0, 0.0, 0.0]);
    }

    #[test]
    fn deterministic_and_saturating() {
        let cfg = NormConfig::default();
        let d = det([120.0, 0.0, 0.0], 0.3, 1, 0.4);
        let pts = [Point::new(120.0, 0.5, 0.2, 0.3, 0.1)];
        let a = instance_input(&d, &pts, &cfg);
        let b = instance_input(&d, &pts, &cfg);
        assert_eq!(a, b);
        assert_eq!(a[11], 1.0);
        assert_eq!(a[0], 1.0);
    }

    #[test]
    fn four_channel_mode() {
        let cfg = NormConfig {
            use_elongation: false,
            ..Default::default()
        };
        assert_eq!(cfg.instance_len(), 13 + 16 + 3);
    }

    #[test]
    fn neighbor_entries() {
        let cfg = NormConfig::default();
        let a = det([0.0, 0.0, 0.0], 0.5, 0, 0.9);
        let b = det([40.0, 0.0, 0.0], 0.5, 2, 0.9);
        let v = neighbor_input(&a, &b, &[0.25, -0.5], &cfg);
        assert_eq!(v.len(), 6 + 3 + 2);
        assert_eq!(v[0], 1.0);
        assert_eq!((v[4], v[5]), (1.0, 0.0));
        assert_eq!(&v[6..9], &[0.0, 0.0, 1.0]);
        assert_eq!(&v[9..], &[0.25, -0.5]);
        let w = neighbor_input(&b, &a, &[], &cfg);
        for k in 1..4 {
            assert_eq!(v[k], -w[k]);
        }
    }

    #[test]
    fn neighbor_radius_examples() {
        let mk = |x: f64| det([x, 0.0, 0.0], 0.0, 0, 0.5);
        let dets = [mk(0.0), mk(30.0), mk(50.0), mk(40.0)];
        assert_eq!(radius_neighbors(&dets, 0, 40.0), vec![1, 3]);
    }

    #[test]
    fn masks() {
        let cfg = NormConfig::default();
        assert!(ablation_mask(FeatureGroups::all(), &cfg)
            .iter()
            .all(|m| *m == 1.0));
        let stats_only = FeatureGroups {
            point_statistics: true,
            ..FeatureGroups::none()
        };
        let m = ablation_mask(stats_only, &cfg);
        assert!(m[..13].iter().all(|x| *x == 0.0));
        assert!(m[13..33].iter().all(|x| *x == 1.0));
        assert!(m[33..].iter().all(|x| *x == 1.0));
        let a = FeatureGroups::parse_list("box,angle").unwrap();
        let b = FeatureGroups::parse_list("angle,stats").unwrap();
        let composed: Vec<f64> = ablation_mask(a, &cfg)
            .iter()
            .zip(ablation_mask(b, &cfg))
            .map(|(x, y)| x * y)
            .collect();
        assert_eq!(composed, ablation_mask(a.intersect(b), &cfg));
        assert!(FeatureGroups::parse_list("colour").is_err());
        assert_eq!(FeatureGroups::from_bits(a.bits()), a);
    }
}
