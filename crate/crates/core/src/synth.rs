//! Seeded synthetic benchmark: scenes with ground truth, surface-sampled
//! LiDAR points and a simulated detector whose mistakes depend on object
//! length, viewing angle, point count and surroundings.
//!
//! Every frame is generated from `mix(seed, index)` alone, so frames can be
//! produced in any order or in parallel. The detector draws from its own
//! stream keyed by `(detector seed, index)`.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::geometry::{
    bev_overlap_area, iou3d, viewing_angle, wrap_angle, BoundingBox3D, Point, PointCloud,
};
use crate::par;
use crate::supervision::{Detection, GroundTruth};
use crate::trainer::Frame;

pub const CLASS_NAMES: [&str; 3] = ["Vehicle", "Pedestrian", "Cyclist"];
pub const VEHICLE: usize = 0;
pub const PEDESTRIAN: usize = 1;
pub const CYCLIST: usize = 2;
pub const GROUND_Z: f64 = -1.8;

pub fn class_names() -> Vec<String> {
    CLASS_NAMES.iter().map(|s| s.to_string()).collect()
}

/// SplitMix64 finalizer.
pub fn mix(a: u64, b: u64) -> u64 {
    let mut z = a ^ b
        .wrapping_add(0x9e37_79b9_7f4a_7c15)
        .wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneConfig {
    pub seed: u64,
    pub frames: usize,
    /// Objects are placed between `min_range` and `fov_radius` meters.
    pub fov_radius: f64,
    pub min_range: f64,
    /// Inclusive count ranges per frame.
    pub vehicles: [usize; 2],
    pub pedestrians: [usize; 2],
    pub cyclists: [usize; 2],
    /// Share of vehicles in the 6-13 m length band.
    pub long_vehicle_fraction: f64,
    /// Probability that a vehicle or cyclist starts a single-file line, and
    /// that a pedestrian starts a group.
    pub convoy_rate: f64,
    pub group_rate: f64,
    /// Probability an object is partly hidden by an unmodeled occluder.
    pub occlusion_rate: f64,
    /// Expected points per square meter of surface facing the sensor at 1 m.
    pub point_density: f64,
    /// Ranges below this count as this for the density law.
    pub density_floor: f64,
    pub ground_points: usize,
    /// Poles and bushes (no ground truth).
    pub distractors: [usize; 2],
    pub elongation: bool,
}

impl SceneConfig {
    /// Scene side of the shipped benchmark.
    pub fn bench_v1() -> Self {
        Self {
            seed: 1,
            frames: 500,
            fov_radius: 70.0,
            min_range: 4.0,
            vehicles: [6, 14],
            pedestrians: [3, 10],
            cyclists: [1, 4],
            long_vehicle_fraction: 0.2,
            convoy_rate: 0.85,
            group_rate: 0.7,
            occlusion_rate: 0.15,
            point_density: 20_000.0,
            density_floor: 5.0,
            ground_points: 3000,
            distractors: [2, 6],
            elongation: true,
        }
    }

    /// Dense frames of roughly 100 detections and 100k points for timing.
    pub fn throughput() -> Self {
        Self {
            seed: 7,
            frames: 16,
            vehicles: [74, 80],
            pedestrians: [44, 48],
            cyclists: [12, 14],
            point_density: 68_000.0,
            ground_points: 40_000,
            distractors: [8, 10],
            ..Self::bench_v1()
        }
    }

    /// Hex SHA-256 over the JSON form; recorded in dataset manifests.
    pub fn digest(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        Sha256::digest(json)
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ObjectKind {
    Car,
    LongVehicle,
    Pedestrian,
    Cyclist,
    Pole,
    Bush,
}

impl ObjectKind {
    pub fn class_id(self) -> Option<usize> {
        match self {
            Self::Car | Self::LongVehicle => Some(VEHICLE),
            Self::Pedestrian => Some(PEDESTRIAN),
            Self::Cyclist => Some(CYCLIST),
            Self::Pole | Self::Bush => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneObject {
    pub bbox: BoundingBox3D,
    pub kind: ObjectKind,
    /// Index of the convoy or pedestrian group, if any.
    pub group: Option<usize>,
    /// Points left on the object after occlusion.
    pub points: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub frame_id: String,
    pub index: usize,
    pub objects: Vec<SceneObject>,
    pub points: PointCloud,
}

impl Scene {
    /// Objects of a detection class that received at least one point.
    pub fn ground_truth(&self) -> Vec<GroundTruth> {
        self.objects
            .iter()
            .filter(|o| o.points > 0)
            .filter_map(|o| {
                o.kind.class_id().map(|class_id| GroundTruth {
                    bbox: o.bbox,
                    class_id,
                })
            })
            .collect()
    }
}

pub fn frame_id(index: usize) -> String {
    format!("{index:06}")
}

fn uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    if hi <= lo {
        lo
    } else {
        rng.random_range(lo..hi)
    }
}

fn count(rng: &mut ChaCha8Rng, r: [usize; 2]) -> usize {
    if r[1] <= r[0] {
        r[0]
    } else {
        rng.random_range(r[0]..=r[1])
    }
}

fn object_box(kind: ObjectKind, x: f64, y: f64, yaw: f64, rng: &mut ChaCha8Rng) -> BoundingBox3D {
    let [l, w, h] = match kind {
        ObjectKind::Car => [
            uniform(rng, 4.0, 5.0),
            uniform(rng, 1.7, 2.0),
            uniform(rng, 1.4, 1.7),
        ],
        ObjectKind::LongVehicle => [
            uniform(rng, 6.0, 13.0),
            uniform(rng, 2.2, 2.6),
            uniform(rng, 2.5, 3.5),
        ],
        ObjectKind::Pedestrian => [
            uniform(rng, 0.7, 0.9),
            uniform(rng, 0.7, 0.9),
            uniform(rng, 1.6, 1.9),
        ],
        ObjectKind::Cyclist => [
            uniform(rng, 1.6, 1.9),
            uniform(rng, 0.6, 0.8),
            uniform(rng, 1.6, 1.8),
        ],
        ObjectKind::Pole => [0.3, 0.3, uniform(rng, 2.5, 4.0)],
        ObjectKind::Bush => [
            uniform(rng, 1.5, 3.0),
            uniform(rng, 1.0, 2.0),
            uniform(rng, 0.7, 1.2),
        ],
    };
    BoundingBox3D::new([x, y, GROUND_Z + 0.5 * h], [l, w, h], yaw).expect("positive extents")
}

struct Placer<'a> {
    cfg: &'a SceneConfig,
    objects: Vec<SceneObject>,
    failures: usize,
}

const PLACEMENT_TRIES: usize = 30;
const CLEARANCE: f64 = 0.3;

impl Placer<'_> {
    fn fits(&self, b: &BoundingBox3D) -> bool {
        let r = b.cx.hypot(b.cy);
        if r < self.cfg.min_range || r > self.cfg.fov_radius {
            return false;
        }
        let grown = BoundingBox3D {
            dx: b.dx + 2.0 * CLEARANCE,
            dy: b.dy + 2.0 * CLEARANCE,
            ..*b
        };
        self.objects
            .iter()
            .all(|o| bev_overlap_area(&grown, &o.bbox) <= 0.0)
    }

    fn push(&mut self, bbox: BoundingBox3D, kind: ObjectKind, group: Option<usize>) -> bool {
        if self.fits(&bbox) {
            self.objects.push(SceneObject {
                bbox,
                kind,
                group,
                points: 0,
            });
            true
        } else {
            false
        }
    }

    fn random_spot(&self, rng: &mut ChaCha8Rng) -> (f64, f64) {
        // uniform over the annulus
        let r2 = uniform(rng, self.cfg.min_range.powi(2), self.cfg.fov_radius.powi(2));
        let a = uniform(rng, -PI, PI);
        let r = r2.sqrt();
        (r * a.cos(), r * a.sin())
    }

    fn single(&mut self, kind: ObjectKind, rng: &mut ChaCha8Rng) -> bool {
        for _ in 0..PLACEMENT_TRIES {
            let (x, y) = self.random_spot(rng);
            let b = object_box(kind, x, y, uniform(rng, -PI, PI), rng);
            if self.push(b, kind, None) {
                return true;
            }
        }
        self.failures += 1;
        false
    }
}

fn vehicle_kind(cfg: &SceneConfig, rng: &mut ChaCha8Rng) -> ObjectKind {
    if rng.random_bool(cfg.long_vehicle_fraction.clamp(0.0, 1.0)) {
        ObjectKind::LongVehicle
    } else {
        ObjectKind::Car
    }
}

/// Places `n` objects, starting a single-file line (convoy, group ride) with
/// probability `rate`; members follow each other at `spacing` meters.
#[allow(clippy::too_many_arguments)]
fn place_lines(
    p: &mut Placer,
    rng: &mut ChaCha8Rng,
    n: usize,
    rate: f64,
    max_size: usize,
    spacing: [f64; 2],
    group_id: &mut usize,
    mut kind: impl FnMut(&mut ChaCha8Rng) -> ObjectKind,
) {
    let mut placed = 0;
    while placed < n {
        let remaining = n - placed;
        if remaining >= 2 && rng.random_bool(rate.clamp(0.0, 1.0)) {
            let size = rng.random_range(2..=remaining.min(max_size));
            let mut ok = false;
            for _ in 0..PLACEMENT_TRIES {
                let (x, y) = p.random_spot(rng);
                let yaw = uniform(rng, -PI, PI);
                let (s, c) = f64::sin_cos(yaw);
                let mut members = Vec::new();
                let mut along = 0.0;
                let mut prev_len: f64 = 0.0;
                for k in 0..size {
                    let kd = kind(rng);
                    let lat = uniform(rng, -0.3, 0.3);
                    let mut b = object_box(kd, x, y, yaw + uniform(rng, -0.05, 0.05), rng);
                    if k > 0 {
                        along -=
                            uniform(rng, spacing[0], spacing[1]).max(0.5 * (prev_len + b.dx) + 1.5);
                    }
                    prev_len = b.dx;
                    b.cx = x + c * along - s * lat;
                    b.cy = y + s * along + c * lat;
                    members.push((b, kd));
                }
                let before = p.objects.len();
                if members
                    .iter()
                    .all(|(b, kd)| p.push(*b, *kd, Some(*group_id)))
                {
                    ok = true;
                    break;
                }
                p.objects.truncate(before);
            }
            if ok {
                *group_id += 1;
            } else {
                p.failures += size;
            }
            placed += size;
        } else {
            let kd = kind(rng);
            p.single(kd, rng);
            placed += 1;
        }
    }
}

fn place_objects(cfg: &SceneConfig, rng: &mut ChaCha8Rng) -> (Vec<SceneObject>, usize) {
    let mut p = Placer {
        cfg,
        objects: Vec::new(),
        failures: 0,
    };
    let mut group_id = 0;

    let n_veh = count(rng, cfg.vehicles);
    place_lines(
        &mut p,
        rng,
        n_veh,
        cfg.convoy_rate,
        4,
        [8.0, 12.0],
        &mut group_id,
        |rng| vehicle_kind(cfg, rng),
    );

    let n_ped = count(rng, cfg.pedestrians);
    let mut placed = 0;
    while placed < n_ped {
        let remaining = n_ped - placed;
        if remaining >= 2 && rng.random_bool(cfg.group_rate.clamp(0.0, 1.0)) {
            let size = rng.random_range(2..=remaining.min(5));
            let mut got = 0;
            for _ in 0..PLACEMENT_TRIES {
                let (x, y) = p.random_spot(rng);
                let before = p.objects.len();
                got = 0;
                for _ in 0..size {
                    for _ in 0..PLACEMENT_TRIES {
                        let r = uniform(rng, 0.0, 2.5);
                        let a = uniform(rng, -PI, PI);
                        let b = object_box(
                            ObjectKind::Pedestrian,
                            x + r * a.cos(),
                            y + r * a.sin(),
                            uniform(rng, -PI, PI),
                            rng,
                        );
                        if p.push(b, ObjectKind::Pedestrian, Some(group_id)) {
                            got += 1;
                            break;
                        }
                    }
                }
                if got >= 2 {
                    break;
                }
                p.objects.truncate(before);
            }
            if got >= 2 {
                group_id += 1;
            } else {
                p.failures += size;
            }
            placed += size;
        } else {
            p.single(ObjectKind::Pedestrian, rng);
            placed += 1;
        }
    }

    let n_cyc = count(rng, cfg.cyclists);
    place_lines(
        &mut p,
        rng,
        n_cyc,
        cfg.convoy_rate,
        3,
        [5.0, 9.0],
        &mut group_id,
        |_| ObjectKind::Cyclist,
    );
    for _ in 0..count(rng, cfg.distractors) {
        let kind = if rng.random_bool(0.5) {
            ObjectKind::Pole
        } else {
            ObjectKind::Bush
        };
        p.single(kind, rng);
    }
    (p.objects, p.failures)
}

fn surface_style(kind: ObjectKind, rear: bool, rng: &mut ChaCha8Rng) -> (f32, f32) {
    let (i, e) = match kind {
        ObjectKind::Car | ObjectKind::LongVehicle if rear => {
            (uniform(rng, 0.6, 0.9), uniform(rng, 0.0, 0.15))
        }
        ObjectKind::Car | ObjectKind::LongVehicle => {
            (uniform(rng, 0.15, 0.4), uniform(rng, 0.0, 0.2))
        }
        ObjectKind::Pedestrian => (uniform(rng, 0.2, 0.4), uniform(rng, 0.0, 0.25)),
        ObjectKind::Cyclist if rear => (uniform(rng, 0.45, 0.75), uniform(rng, 0.0, 0.2)),
        ObjectKind::Cyclist => (uniform(rng, 0.2, 0.45), uniform(rng, 0.0, 0.2)),
        ObjectKind::Pole => (uniform(rng, 0.7, 1.0), uniform(rng, 0.0, 0.1)),
        ObjectKind::Bush => (uniform(rng, 0.05, 0.2), uniform(rng, 0.5, 1.0)),
    };
    (i as f32, e as f32)
}

/// Expected point count of one face: density x area x cos(incidence) / range^2.
pub fn face_rate(cfg: &SceneConfig, area: f64, center: [f64; 3], normal: [f64; 3]) -> f64 {
    let r = (center[0].powi(2) + center[1].powi(2) + center[2].powi(2)).sqrt();
    if r == 0.0 {
        return 0.0;
    }
    let cos = -(normal[0] * center[0] + normal[1] * center[1] + normal[2] * center[2]) / r;
    if cos <= 0.0 {
        return 0.0;
    }
    cfg.point_density * area * cos / r.max(cfg.density_floor).powi(2)
}

fn poisson(rng: &mut ChaCha8Rng, lambda: f64) -> usize {
    if lambda <= 0.0 {
        return 0;
    }
    Poisson::new(lambda)
        .map(|d| d.sample(rng) as usize)
        .unwrap_or(0)
}

/// Points on the faces of `o` that look toward the sensor.
pub fn sample_surface(cfg: &SceneConfig, o: &SceneObject, rng: &mut ChaCha8Rng) -> Vec<Point> {
    let b = &o.bbox;
    let (s, c) = b.yaw.sin_cos();
    let (hx, hy, hz) = (0.5 * b.dx, 0.5 * b.dy, 0.5 * b.dz);
    let jitter = if o.kind == ObjectKind::Bush {
        0.15
    } else {
        0.02
    };
    let noise = Normal::new(0.0, jitter).unwrap();
    let world = |l: [f64; 3]| {
        [
            b.cx + c * l[0] - s * l[1],
            b.cy + s * l[0] + c * l[1],
            b.cz + l[2],
        ]
    };
    // (local normal axis, sign, area, rear)
    let faces = [
        (0usize, 1.0, b.dy * b.dz, false),
        (0, -1.0, b.dy * b.dz, true),
        (1, 1.0, b.dx * b.dz, false),
        (1, -1.0, b.dx * b.dz, false),
        (2, 1.0, b.dx * b.dy, false),
    ];
    let mut out = Vec::new();
    for (axis, sign, area, rear) in faces {
        let mut ln = [0.0; 3];
        ln[axis] = sign;
        let mut lc = [0.0; 3];
        lc[axis] = sign * [hx, hy, hz][axis];
        let wn = [c * ln[0] - s * ln[1], s * ln[0] + c * ln[1], ln[2]];
        let n = poisson(rng, face_rate(cfg, area, world(lc), wn));
        for _ in 0..n {
            let mut l = [
                uniform(rng, -hx, hx),
                uniform(rng, -hy, hy),
                uniform(rng, -hz, hz),
            ];
            l[axis] = sign * [hx, hy, hz][axis];
            for v in l.iter_mut() {
                *v += noise.sample(rng);
            }
            let w = world(l);
            let (intensity, elong) = surface_style(o.kind, rear && axis == 0, rng);
            out.push(Point::new(
                w[0] as f32,
                w[1] as f32,
                w[2] as f32,
                intensity,
                elong,
            ));
        }
    }
    out
}

/// Azimuth interval (relative to the center azimuth), nearest BEV range and
/// top elevation of a box as seen from the sensor.
struct Shadow {
    center_az: f64,
    lo: f64,
    hi: f64,
    near: f64,
    top_elev: f64,
}

fn shadow(b: &BoundingBox3D) -> Shadow {
    let center_az = b.cy.atan2(b.cx);
    let (mut lo, mut hi, mut near) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY);
    for [x, y] in b.bev_corners() {
        let d = wrap_angle(y.atan2(x) - center_az);
        lo = lo.min(d);
        hi = hi.max(d);
        near = near.min(x.hypot(y));
    }
    let top = b.cz + 0.5 * b.dz;
    Shadow {
        center_az,
        lo,
        hi,
        near,
        top_elev: top.atan2(near),
    }
}

fn shadowed(p: &Point, own: usize, shadows: &[Shadow]) -> bool {
    let (x, y, z) = (p.x as f64, p.y as f64, p.z as f64);
    let r = x.hypot(y);
    let az = y.atan2(x);
    let elev = z.atan2(r);
    shadows.iter().enumerate().any(|(k, s)| {
        if k == own || s.near >= r {
            return false;
        }
        let d = wrap_angle(az - s.center_az);
        d >= s.lo && d <= s.hi && elev < s.top_elev
    })
}

/// One frame of the scene distribution, a pure function of `(cfg, index)`.
pub fn generate_scene(cfg: &SceneConfig, index: usize) -> Scene {
    let mut rng = ChaCha8Rng::seed_from_u64(mix(cfg.seed, index as u64));
    let (mut objects, failures) = place_objects(cfg, &mut rng);
    if failures > 0 {
        log::debug!("frame {index}: {failures} placements failed, scene has fewer objects");
    }
    let shadows: Vec<Shadow> = objects.iter().map(|o| shadow(&o.bbox)).collect();
    let mut points = Vec::new();
    for k in 0..objects.len() {
        let mut pts = sample_surface(cfg, &objects[k], &mut rng);
        pts.retain(|p| !shadowed(p, k, &shadows));
        if rng.random_bool(cfg.occlusion_rate.clamp(0.0, 1.0)) {
            let s = &shadows[k];
            let width = (s.hi - s.lo) * uniform(&mut rng, 0.3, 0.8);
            let start = uniform(&mut rng, s.lo, s.hi - width);
            pts.retain(|p| {
                let d = wrap_angle((p.y as f64).atan2(p.x as f64) - s.center_az);
                d < start || d > start + width
            });
        }
        objects[k].points = pts.len();
        points.extend(pts);
    }
    let z_noise = Normal::new(0.0, 0.03).unwrap();
    for _ in 0..cfg.ground_points {
        let r = uniform(&mut rng, 2.0, cfg.fov_radius);
        let a = uniform(&mut rng, -PI, PI);
        let (x, y) = (r * a.cos(), r * a.sin());
        let under = objects.iter().any(|o| {
            let l = o.bbox.to_local(x, y, o.bbox.cz);
            l[0].abs() <= 0.5 * o.bbox.dx && l[1].abs() <= 0.5 * o.bbox.dy
        });
        if under {
            continue;
        }
        let z = GROUND_Z + z_noise.sample(&mut rng);
        points.push(Point::new(
            x as f32,
            y as f32,
            z as f32,
            uniform(&mut rng, 0.02, 0.2) as f32,
            uniform(&mut rng, 0.1, 0.4) as f32,
        ));
    }
    if !cfg.elongation {
        for p in points.iter_mut() {
            p.elongation = 0.0;
        }
    }
    Scene {
        frame_id: frame_id(index),
        index,
        objects,
        points: PointCloud::new(points, cfg.elongation),
    }
}

/// Error statistics of the simulated detector. Scores are logistic in a
/// logit built from the terms below plus Gaussian noise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectorErrorModel {
    pub name: String,
    /// Base TP logit per class.
    pub tp_logit: [f64; 3],
    pub score_noise: f64,
    /// Logit gain per unit IoU of the emitted box with its object.
    pub quality_weight: f64,
    /// Logit penalty `sparse_penalty * exp(-points / 30)`.
    pub sparse_penalty: f64,
    /// Logit penalty times `|sin(viewing angle)|` for vehicles and cyclists.
    pub side_view_penalty: f64,
    /// Logit penalty for vehicles in the 6-13 m band.
    pub long_penalty: f64,
    /// Detection probability `1 - exp(-points / detect_scale)`.
    pub detect_scale: f64,
    pub jitter_pos: f64,
    pub jitter_yaw: f64,
    pub jitter_size: f64,
    pub heading_flip: f64,
    /// Per-class probability that a detection is reported shifted past the
    /// IoU threshold, keeping its confident score.
    pub mislocalize_rate: [f64; 3],
    /// Per-class probability of an extra shifted duplicate.
    pub duplicate_rate: [f64; 3],
    /// Logit drop of the duplicate relative to its source detection.
    pub duplicate_offset: f64,
    /// Expected clutter boxes per frame per class, placed in empty space.
    pub clutter_rate: [f64; 3],
    pub clutter_logit: f64,
    /// Probability a detected car is reported as an over-extended 6-13 m box.
    pub extend_rate: f64,
    pub extend_logit: f64,
    /// Probability a pole or bush yields a detection.
    pub distractor_rate: f64,
    pub distractor_logit: f64,
    /// Probability a detected pedestrian is reported as a cyclist.
    pub misclass_rate: f64,
    pub misclass_logit: f64,
}

impl DetectorErrorModel {
    pub fn a() -> Self {
        Self {
            name: "a".into(),
            tp_logit: [1.6, 1.2, 1.2],
            score_noise: 0.7,
            quality_weight: 3.0,
            sparse_penalty: 1.8,
            side_view_penalty: 0.9,
            long_penalty: 1.4,
            detect_scale: 6.0,
            jitter_pos: 0.08,
            jitter_yaw: 0.03,
            jitter_size: 0.03,
            heading_flip: 0.04,
            mislocalize_rate: [0.05, 0.05, 0.05],
            duplicate_rate: [0.04, 0.04, 0.04],
            duplicate_offset: 0.8,
            clutter_rate: [3.0, 2.0, 1.5],
            clutter_logit: 0.6,
            extend_rate: 0.08,
            extend_logit: 1.3,
            distractor_rate: 0.6,
            distractor_logit: 0.9,
            misclass_rate: 0.15,
            misclass_logit: 0.5,
        }
    }

    /// A second detector with different noise, biases and error mix.
    pub fn b() -> Self {
        Self {
            name: "b".into(),
            tp_logit: [1.2, 0.9, 1.0],
            score_noise: 0.9,
            quality_weight: 2.0,
            sparse_penalty: 1.2,
            side_view_penalty: 1.3,
            long_penalty: 1.0,
            detect_scale: 7.0,
            jitter_pos: 0.11,
            jitter_yaw: 0.04,
            jitter_size: 0.04,
            heading_flip: 0.06,
            mislocalize_rate: [0.08, 0.06, 0.08],
            duplicate_rate: [0.06, 0.03, 0.04],
            duplicate_offset: 0.4,
            clutter_rate: [1.5, 3.0, 1.5],
            clutter_logit: 0.3,
            extend_rate: 0.12,
            extend_logit: 1.0,
            distractor_rate: 0.5,
            distractor_logit: 0.7,
            misclass_rate: 0.15,
            misclass_logit: 0.4,
        }
    }

    /// Noise-free, error-free detector.
    pub fn perfect() -> Self {
        Self {
            name: "perfect".into(),
            tp_logit: [2.0; 3],
            score_noise: 0.0,
            quality_weight: 0.0,
            sparse_penalty: 0.0,
            side_view_penalty: 0.0,
            long_penalty: 0.0,
            detect_scale: 0.0,
            jitter_pos: 0.0,
            jitter_yaw: 0.0,
            jitter_size: 0.0,
            heading_flip: 0.0,
            mislocalize_rate: [0.0; 3],
            duplicate_rate: [0.0; 3],
            duplicate_offset: 0.0,
            clutter_rate: [0.0; 3],
            clutter_logit: 0.0,
            extend_rate: 0.0,
            extend_logit: 0.0,
            distractor_rate: 0.0,
            distractor_logit: 0.0,
            misclass_rate: 0.0,
            misclass_logit: 0.0,
        }
    }

    pub fn by_name(name: &str) -> Option<Self> {
        match name {
            "a" | "A" => Some(Self::a()),
            "b" | "B" => Some(Self::b()),
            "perfect" => Some(Self::perfect()),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        let probs = [
            self.heading_flip,
            self.extend_rate,
            self.distractor_rate,
            self.misclass_rate,
        ]
        .into_iter()
        .chain(self.duplicate_rate)
        .chain(self.mislocalize_rate);
        for p in probs {
            if !(0.0..=1.0).contains(&p) {
                return Err(format!("probability {p} outside [0, 1]"));
            }
        }
        let nonneg = [
            self.score_noise,
            self.jitter_pos,
            self.jitter_yaw,
            self.jitter_size,
            self.detect_scale,
        ]
        .into_iter()
        .chain(self.clutter_rate);
        if nonneg.into_iter().any(|v| !(v >= 0.0 && v.is_finite())) {
            return Err("noise levels and rates must be non-negative".into());
        }
        Ok(())
    }
}

fn logistic(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

const IOU_THRESHOLDS: [f64; 3] = [0.7, 0.5, 0.5];
/// Clutter boxes keep at least this BEV distance to every scene object.
const CLUTTER_ISOLATION: f64 = 15.0;

/// Box shifted along its heading until its IoU with `b` drops below the
/// class threshold.
fn near_miss(b: &BoundingBox3D, class_id: usize, rng: &mut ChaCha8Rng) -> BoundingBox3D {
    let thr = IOU_THRESHOLDS[class_id];
    // for a pure shift by f*dx, IoU = (1-f)/(1+f)
    let f_min = (1.0 - thr) / (1.0 + thr);
    let f = uniform(rng, f_min + 0.04, f_min + 0.25);
    let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
    let (s, c) = b.yaw.sin_cos();
    let d = sign * f * b.dx;
    let lat = uniform(rng, -0.1, 0.1) * b.dy;
    b.translated([c * d - s * lat, s * d + c * lat, 0.0])
}

fn class_box(class_id: usize, x: f64, y: f64, yaw: f64, rng: &mut ChaCha8Rng) -> BoundingBox3D {
    let kind = match class_id {
        VEHICLE => ObjectKind::Car,
        PEDESTRIAN => ObjectKind::Pedestrian,
        _ => ObjectKind::Cyclist,
    };
    object_box(kind, x, y, yaw, rng)
}

/// Runs the simulated detector on a scene.
pub fn simulate_detector(scene: &Scene, model: &DetectorErrorModel, seed: u64) -> Vec<Detection> {
    let mut rng = ChaCha8Rng::seed_from_u64(mix(mix(seed, 0xde7ec7), scene.index as u64));
    let noise = |rng: &mut ChaCha8Rng, sd: f64| {
        if sd > 0.0 {
            Normal::new(0.0, sd).unwrap().sample(rng)
        } else {
            0.0
        }
    };
    let mut dets = Vec::new();
    let emit = |dets: &mut Vec<Detection>, bbox: BoundingBox3D, class_id: usize, logit: f64| {
        dets.push(Detection {
            bbox,
            class_id,
            score: logistic(logit),
        });
    };
    for o in &scene.objects {
        let n = o.points as f64;
        match o.kind.class_id() {
            Some(class_id) if o.points > 0 => {
                let p_det = if model.detect_scale > 0.0 {
                    1.0 - (-n / model.detect_scale).exp()
                } else {
                    1.0
                };
                if !rng.random_bool(p_det.clamp(0.0, 1.0)) {
                    continue;
                }
                let b = &o.bbox;
                if o.kind == ObjectKind::Car && rng.random_bool(model.extend_rate) {
                    // the car is reported as one over-long box
                    let len = uniform(&mut rng, 6.0, 13.0);
                    let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
                    let shift = sign * 0.5 * (len - b.dx);
                    let (s, c) = b.yaw.sin_cos();
                    let ext = BoundingBox3D::new(
                        [b.cx + c * shift, b.cy + s * shift, b.cz + 0.3],
                        [len, b.dy * 1.15, b.dz + 0.6],
                        b.yaw,
                    )
                    .expect("extended box");
                    let l = model.extend_logit + noise(&mut rng, model.score_noise);
                    emit(&mut dets, ext, VEHICLE, l);
                    continue;
                }
                if class_id == PEDESTRIAN && rng.random_bool(model.misclass_rate) {
                    let cb = class_box(CYCLIST, b.cx, b.cy, b.yaw, &mut rng);
                    let l = model.misclass_logit + noise(&mut rng, model.score_noise);
                    emit(&mut dets, cb, CYCLIST, l);
                    continue;
                }
                let scale = 1.0 + b.range() / 50.0;
                let mut yaw = b.yaw + noise(&mut rng, model.jitter_yaw);
                if class_id == VEHICLE && rng.random_bool(model.heading_flip) {
                    yaw += std::f64::consts::PI;
                }
                let det_box = BoundingBox3D::new(
                    [
                        b.cx + noise(&mut rng, model.jitter_pos * scale),
                        b.cy + noise(&mut rng, model.jitter_pos * scale),
                        b.cz + noise(&mut rng, 0.5 * model.jitter_pos),
                    ],
                    [
                        b.dx * (1.0 + noise(&mut rng, model.jitter_size)).max(0.5),
                        b.dy * (1.0 + noise(&mut rng, model.jitter_size)).max(0.5),
                        b.dz * (1.0 + noise(&mut rng, model.jitter_size)).max(0.5),
                    ],
                    yaw,
                )
                .expect("jittered box");
                let side = viewing_angle(b).sin().abs();
                let mut logit = model.tp_logit[class_id]
                    + model.quality_weight * (iou3d(&det_box, b) - 0.7)
                    - model.sparse_penalty * (-n / 30.0).exp()
                    + noise(&mut rng, model.score_noise);
                if class_id != PEDESTRIAN {
                    logit -= model.side_view_penalty * side;
                }
                if o.kind == ObjectKind::LongVehicle {
                    logit -= model.long_penalty;
                }
                let reported = if rng.random_bool(model.mislocalize_rate[class_id]) {
                    near_miss(&det_box, class_id, &mut rng)
                } else {
                    det_box
                };
                emit(&mut dets, reported, class_id, logit);
                if rng.random_bool(model.duplicate_rate[class_id]) {
                    let dup = near_miss(&det_box, class_id, &mut rng);
                    let l = logit - model.duplicate_offset + noise(&mut rng, model.score_noise);
                    emit(&mut dets, dup, class_id, l);
                }
            }
            None if rng.random_bool(model.distractor_rate) => {
                let b = &o.bbox;
                let class_id = match o.kind {
                    ObjectKind::Pole => PEDESTRIAN,
                    _ if rng.random_bool(0.6) => VEHICLE,
                    _ => CYCLIST,
                };
                let fp = class_box(class_id, b.cx, b.cy, b.yaw, &mut rng);
                let l = model.distractor_logit + noise(&mut rng, model.score_noise);
                emit(&mut dets, fp, class_id, l);
            }
            _ => {}
        }
    }
    for class_id in 0..3 {
        for _ in 0..poisson(&mut rng, model.clutter_rate[class_id]) {
            for _ in 0..PLACEMENT_TRIES {
                let r = uniform(&mut rng, 5.0, 65.0);
                let a = uniform(&mut rng, -PI, PI);
                let (x, y) = (r * a.cos(), r * a.sin());
                let isolated = scene
                    .objects
                    .iter()
                    .all(|o| (o.bbox.cx - x).hypot(o.bbox.cy - y) > CLUTTER_ISOLATION);
                if isolated {
                    let b = class_box(class_id, x, y, uniform(&mut rng, -PI, PI), &mut rng);
                    let l = model.clutter_logit + noise(&mut rng, model.score_noise);
                    emit(&mut dets, b, class_id, l);
                    break;
                }
            }
        }
    }
    // detectors report in descending confidence
    dets.sort_by(|a, b| b.score.total_cmp(&a.score));
    dets
}

/// Scene plus detector output as a [`Frame`] with ground truth.
pub fn generate_frame(
    cfg: &SceneConfig,
    model: &DetectorErrorModel,
    detector_seed: u64,
    index: usize,
) -> Frame {
    let scene = generate_scene(cfg, index);
    let detections = simulate_detector(&scene, model, detector_seed);
    Frame {
        frame_id: scene.frame_id.clone(),
        ground_truth: Some(scene.ground_truth()),
        points: scene.points,
        detections,
    }
}

/// Frames `range` generated in parallel, in index order.
pub fn generate_frames(
    cfg: &SceneConfig,
    model: &DetectorErrorModel,
    detector_seed: u64,
    range: std::ops::Range<usize>,
) -> Vec<Frame> {
    par::map_range(range, |i| generate_frame(cfg, model, detector_seed, i))
}

/// The shipped benchmark: 400 training and 100 evaluation frames.
pub struct BenchV1;

impl BenchV1 {
    pub const TRAIN: std::ops::Range<usize> = 0..400;
    pub const EVAL: std::ops::Range<usize> = 400..500;
    pub const DETECTOR_SEED: u64 = 11;

    pub fn scene() -> SceneConfig {
        SceneConfig::bench_v1()
    }

    pub fn detector() -> DetectorErrorModel {
        DetectorErrorModel::a()
    }

    pub fn train() -> Vec<Frame> {
        generate_frames(
            &Self::scene(),
            &Self::detector(),
            Self::DETECTOR_SEED,
            Self::TRAIN,
        )
    }

    pub fn eval() -> Vec<Frame> {
        generate_frames(
            &Self::scene(),
            &Self::detector(),
            Self::DETECTOR_SEED,
            Self::EVAL,
        )
    }
}

/// Transfer target: another scene seed, 4-channel points and detector B.
pub fn transfer_b_scene() -> SceneConfig {
    SceneConfig {
        seed: 2,
        frames: 100,
        elongation: false,
        ..SceneConfig::bench_v1()
    }
}
