//! Geometric kernels on oriented boxes and LiDAR points.
//!
//! Boxes are yaw-only: a center, full extents along the box-local axes and a
//! heading about the sensor z-axis. Everything here is a pure function.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Slack used for on-boundary classification (containment, clipping).
pub const BOUNDARY_EPS: f64 = 1e-9;

#[derive(Debug, Error, PartialEq)]
pub enum GeometryError {
    #[error("box extents must be finite and positive, got ({0}, {1}, {2})")]
    InvalidExtent(f64, f64, f64),
    #[error("box center/yaw must be finite")]
    NonFinite,
}

/// Wraps an angle into `(-pi, pi]`.
pub fn wrap_angle(a: f64) -> f64 {
    let mut w = a.rem_euclid(2.0 * PI);
    if w > PI {
        w -= 2.0 * PI;
    }
    // rem_euclid maps -pi to pi already; guard the other side
    if w <= -PI {
        w += 2.0 * PI;
    }
    w
}

/// `(cos a, sin a)`.
pub fn angle_encode(a: f64) -> (f64, f64) {
    (a.cos(), a.sin())
}

/// A single LiDAR return in the sensor frame.
///
/// `elongation` is only meaningful for clouds that carry the fifth channel;
/// see [`PointCloud::has_elongation`].
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Point {
    pub x: f32,
    pub y: f32,
    pub z: f32,
    pub intensity: f32,
    pub elongation: f32,
}

impl Point {
    pub fn new(x: f32, y: f32, z: f32, intensity: f32, elongation: f32) -> Self {
        Self {
            x,
            y,
            z,
            intensity,
            elongation,
        }
    }
}

/// All points of one sweep. The channel layout is uniform within a cloud.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PointCloud {
    pub points: Vec<Point>,
    pub has_elongation: bool,
}

impl PointCloud {
    pub fn new(points: Vec<Point>, has_elongation: bool) -> Self {
        Self {
            points,
            has_elongation,
        }
    }

    pub fn channels(&self) -> usize {
        if self.has_elongation {
            5
        } else {
            4
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Oriented 3D box: center, full extents, yaw in `(-pi, pi]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox3D {
    pub cx: f64,
    pub cy: f64,
    pub cz: f64,
    pub dx: f64,
    pub dy: f64,
    pub dz: f64,
    pub yaw: f64,
}

impl BoundingBox3D {
    pub fn new(center: [f64; 3], extent: [f64; 3], yaw: f64) -> Result<Self, GeometryError> {
        let [dx, dy, dz] = extent;
        if !(dx.is_finite() && dy.is_finite() && dz.is_finite() && dx > 0.0 && dy > 0.0 && dz > 0.0)
        {
            return Err(GeometryError::InvalidExtent(dx, dy, dz));
        }
        if !(center.iter().all(|c| c.is_finite()) && yaw.is_finite()) {
            return Err(GeometryError::NonFinite);
        }
        Ok(Self {
            cx: center[0],
            cy: center[1],
            cz: center[2],
            dx,
            dy,
            dz,
            yaw: wrap_angle(yaw),
        })
    }

    pub fn center(&self) -> [f64; 3] {
        [self.cx, self.cy, self.cz]
    }

    pub fn volume(&self) -> f64 {
        self.dx * self.dy * self.dz
    }

    /// Euclidean distance from the sensor origin to the center.
    pub fn range(&self) -> f64 {
        (self.cx * self.cx + self.cy * self.cy + self.cz * self.cz).sqrt()
    }

    /// The same box after rotating the whole scene by `phi` about the sensor z-axis.
    pub fn rotated_about_sensor(&self, phi: f64) -> Self {
        let (s, c) = phi.sin_cos();
        Self {
            cx: c * self.cx - s * self.cy,
            cy: s * self.cx + c * self.cy,
            yaw: wrap_angle(self.yaw + phi),
            ..*self
        }
    }

    pub fn translated(&self, t: [f64; 3]) -> Self {
        Self {
            cx: self.cx + t[0],
            cy: self.cy + t[1],
            cz: self.cz + t[2],
            ..*self
        }
    }

    /// Maps a sensor-frame position into the box-local frame.
    #[inline]
    pub fn to_local(&self, x: f64, y: f64, z: f64) -> [f64; 3] {
        let (s, c) = self.yaw.sin_cos();
        let tx = x - self.cx;
        let ty = y - self.cy;
        [c * tx + s * ty, -s * tx + c * ty, z - self.cz]
    }

    /// Closed containment test in the box-local frame.
    #[inline]
    pub fn contains(&self, p: &Point) -> bool {
        let [lx, ly, lz] = self.to_local(p.x as f64, p.y as f64, p.z as f64);
        lx.abs() <= 0.5 * self.dx + BOUNDARY_EPS
            && ly.abs() <= 0.5 * self.dy + BOUNDARY_EPS
            && lz.abs() <= 0.5 * self.dz + BOUNDARY_EPS
    }

    /// BEV corners, counter-clockwise.
    pub fn bev_corners(&self) -> [[f64; 2]; 4] {
        let (s, c) = self.yaw.sin_cos();
        let hx = 0.5 * self.dx;
        let hy = 0.5 * self.dy;
        let local = [[hx, hy], [-hx, hy], [-hx, -hy], [hx, -hy]];
        local.map(|[lx, ly]| [self.cx + c * lx - s * ly, self.cy + s * lx + c * ly])
    }

    /// Axis-aligned BEV bounds `(min_x, min_y, max_x, max_y)`.
    pub fn bev_aabb(&self) -> (f64, f64, f64, f64) {
        let (s, c) = self.yaw.sin_cos();
        let ex = 0.5 * (self.dx * c.abs() + self.dy * s.abs());
        let ey = 0.5 * (self.dx * s.abs() + self.dy * c.abs());
        (self.cx - ex, self.cy - ey, self.cx + ex, self.cy + ey)
    }

    fn z_interval(&self) -> (f64, f64) {
        (self.cz - 0.5 * self.dz, self.cz + 0.5 * self.dz)
    }
}

/// Angle between the line of sight and the heading, wrapped to `(-pi, pi]`.
///
/// A box centered exactly above the sensor has no line of sight; the yaw
/// itself is returned there.
pub fn viewing_angle(b: &BoundingBox3D) -> f64 {
    if b.cx == 0.0 && b.cy == 0.0 {
        return b.yaw;
    }
    wrap_angle(b.yaw - b.cy.atan2(b.cx))
}

/// Points of `points` inside `b` (closed test), in input order.
pub fn points_in_box(points: &[Point], b: &BoundingBox3D) -> Vec<Point> {
    points.iter().filter(|p| b.contains(p)).copied().collect()
}

/// A box with its rotation precomputed, for tight per-point loops. Gives
/// bit-identical results to the [`BoundingBox3D`] methods.
#[derive(Debug, Clone, Copy)]
pub struct BoxFrame {
    b: BoundingBox3D,
    s: f64,
    c: f64,
}

impl BoxFrame {
    pub fn new(b: &BoundingBox3D) -> Self {
        let (s, c) = b.yaw.sin_cos();
        Self { b: *b, s, c }
    }

    #[inline]
    pub fn to_local(&self, x: f64, y: f64, z: f64) -> [f64; 3] {
        let tx = x - self.b.cx;
        let ty = y - self.b.cy;
        [
            self.c * tx + self.s * ty,
            -self.s * tx + self.c * ty,
            z - self.b.cz,
        ]
    }

    #[inline]
    pub fn contains(&self, p: &Point) -> bool {
        let [lx, ly, lz] = self.to_local(p.x as f64, p.y as f64, p.z as f64);
        lx.abs() <= 0.5 * self.b.dx + BOUNDARY_EPS
            && ly.abs() <= 0.5 * self.b.dy + BOUNDARY_EPS
            && lz.abs() <= 0.5 * self.b.dz + BOUNDARY_EPS
    }

    #[inline]
    pub fn canonical(&self, p: &Point) -> CanonicalPoint {
        let [lx, ly, lz] = self.to_local(p.x as f64, p.y as f64, p.z as f64);
        [
            lx / self.b.dx,
            ly / self.b.dy,
            lz / self.b.dz,
            p.intensity as f64,
            p.elongation as f64,
        ]
    }
}

/// A point in the unit-box frame: `[x, y, z, intensity, elongation]`.
pub type CanonicalPoint = [f64; 5];

/// Translate, de-rotate and scale points into the unit box `[-0.5, 0.5]^3`.
/// Intensity and elongation pass through.
pub fn canonicalize(points: &[Point], b: &BoundingBox3D) -> Vec<CanonicalPoint> {
    points.iter().map(|p| canonical_point(p, b)).collect()
}

#[inline]
pub fn canonical_point(p: &Point, b: &BoundingBox3D) -> CanonicalPoint {
    let [lx, ly, lz] = b.to_local(p.x as f64, p.y as f64, p.z as f64);
    [
        lx / b.dx,
        ly / b.dy,
        lz / b.dz,
        p.intensity as f64,
        p.elongation as f64,
    ]
}

/// A channel of a canonical point that statistics can be taken over.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum StatChannel {
    X,
    Y,
    Z,
    Intensity,
    Elongation,
}

impl StatChannel {
    pub const ALL: [StatChannel; 5] = [
        StatChannel::X,
        StatChannel::Y,
        StatChannel::Z,
        StatChannel::Intensity,
        StatChannel::Elongation,
    ];

    fn index(self) -> usize {
        match self {
            StatChannel::X => 0,
            StatChannel::Y => 1,
            StatChannel::Z => 2,
            StatChannel::Intensity => 3,
            StatChannel::Elongation => 4,
        }
    }

    pub fn bit(self) -> u8 {
        1 << self.index()
    }
}

/// Ordered channel selection for [`point_statistics`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChannelSet(u8);

impl ChannelSet {
    pub fn all() -> Self {
        Self(0b1_1111)
    }

    pub fn spatial() -> Self {
        Self(0b111)
    }

    pub fn from_bits(bits: u8) -> Self {
        Self(bits & 0b1_1111)
    }

    pub fn bits(self) -> u8 {
        self.0
    }

    pub fn with(self, c: StatChannel) -> Self {
        Self(self.0 | c.bit())
    }

    pub fn without(self, c: StatChannel) -> Self {
        Self(self.0 & !c.bit())
    }

    pub fn contains(self, c: StatChannel) -> bool {
        self.0 & c.bit() != 0
    }

    pub fn len(self) -> usize {
        self.0.count_ones() as usize
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }

    /// Selected channels in canonical order (x, y, z, intensity, elongation).
    pub fn iter(self) -> impl Iterator<Item = StatChannel> {
        StatChannel::ALL
            .into_iter()
            .filter(move |c| self.contains(*c))
    }
}

impl Default for ChannelSet {
    fn default() -> Self {
        Self::all()
    }
}

/// Per-channel summary of the canonical points inside one box.
#[derive(Debug, Clone, PartialEq)]
pub struct PointStats {
    pub channels: ChannelSet,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub min: Vec<f64>,
    pub max: Vec<f64>,
    pub point_count: usize,
}

impl PointStats {
    pub fn empty(channels: ChannelSet) -> Self {
        let n = channels.len();
        Self {
            channels,
            mean: vec![0.0; n],
            std: vec![0.0; n],
            min: vec![0.0; n],
            max: vec![0.0; n],
            point_count: 0,
        }
    }

    /// `mean ++ std ++ min ++ max`.
    pub fn flatten_into(&self, out: &mut Vec<f64>) {
        out.extend_from_slice(&self.mean);
        out.extend_from_slice(&self.std);
        out.extend_from_slice(&self.min);
        out.extend_from_slice(&self.max);
    }
}

/// Mean, population standard deviation, min and max per selected channel.
/// An empty input gives all-zero statistics with a count of 0.
pub fn point_statistics(canonical: &[CanonicalPoint], channels: ChannelSet) -> PointStats {
    let mut acc = StatsAccumulator::new(channels);
    for p in canonical {
        acc.push(p);
    }
    acc.finish()
}

/// Single-pass statistics builder, so callers can stream points without
/// materializing the canonical set.
#[derive(Debug, Clone)]
pub struct StatsAccumulator {
    channels: ChannelSet,
    idx: [usize; 5],
    n_ch: usize,
    count: usize,
    sum: [f64; 5],
    sum_sq: [f64; 5],
    min: [f64; 5],
    max: [f64; 5],
}

impl StatsAccumulator {
    pub fn new(channels: ChannelSet) -> Self {
        let mut idx = [0usize; 5];
        let mut n_ch = 0;
        for c in channels.iter() {
            idx[n_ch] = c.index();
            n_ch += 1;
        }
        Self {
            channels,
            idx,
            n_ch,
            count: 0,
            sum: [0.0; 5],
            sum_sq: [0.0; 5],
            min: [f64::INFINITY; 5],
            max: [f64::NEG_INFINITY; 5],
        }
    }

    #[inline]
    pub fn push(&mut self, p: &CanonicalPoint) {
        self.count += 1;
        for k in 0..self.n_ch {
            let v = p[self.idx[k]];
            self.sum[k] += v;
            self.sum_sq[k] += v * v;
            self.min[k] = self.min[k].min(v);
            self.max[k] = self.max[k].max(v);
        }
    }

    pub fn finish(self) -> PointStats {
        if self.count == 0 {
            return PointStats::empty(self.channels);
        }
        let n = self.count as f64;
        let mut out = PointStats::empty(self.channels);
        for k in 0..self.n_ch {
            // clamp into [min, max]; the running sum can drift by an ulp
            let mean = (self.sum[k] / n).clamp(self.min[k], self.max[k]);
            let var = (self.sum_sq[k] / n - mean * mean).max(0.0);
            out.mean[k] = mean;
            out.std[k] = var.sqrt();
            out.min[k] = self.min[k];
            out.max[k] = self.max[k];
        }
        out.point_count = self.count;
        out
    }
}

type Poly = Vec<[f64; 2]>;

fn cross(o: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])
}

/// Sutherland-Hodgman: clip `subject` against every edge of the convex,
/// counter-clockwise `clip` polygon.
fn clip_convex(subject: &[[f64; 2]], clip: &[[f64; 2]]) -> Poly {
    let mut output: Poly = subject.to_vec();
    for i in 0..clip.len() {
        if output.is_empty() {
            break;
        }
        let a = clip[i];
        let b = clip[(i + 1) % clip.len()];
        let input = std::mem::take(&mut output);
        for j in 0..input.len() {
            let cur = input[j];
            let prev = input[(j + input.len() - 1) % input.len()];
            let cur_in = cross(a, b, cur) >= -BOUNDARY_EPS;
            let prev_in = cross(a, b, prev) >= -BOUNDARY_EPS;
            if cur_in {
                if !prev_in {
                    output.push(line_intersection(prev, cur, a, b));
                }
                output.push(cur);
            } else if prev_in {
                output.push(line_intersection(prev, cur, a, b));
            }
        }
    }
    output
}

fn line_intersection(p: [f64; 2], q: [f64; 2], a: [f64; 2], b: [f64; 2]) -> [f64; 2] {
    let dp = cross(a, b, p);
    let dq = cross(a, b, q);
    let denom = dp - dq;
    if denom.abs() < f64::MIN_POSITIVE {
        return q;
    }
    let t = dp / denom;
    [p[0] + t * (q[0] - p[0]), p[1] + t * (q[1] - p[1])]
}

fn shoelace(poly: &[[f64; 2]]) -> f64 {
    if poly.len() < 3 {
        return 0.0;
    }
    let mut twice = 0.0;
    for i in 0..poly.len() {
        let p = poly[i];
        let q = poly[(i + 1) % poly.len()];
        twice += p[0] * q[1] - q[0] * p[1];
    }
    0.5 * twice.abs()
}

/// Intersection area of the two yaw-rotated footprints in the xy-plane.
pub fn bev_overlap_area(a: &BoundingBox3D, b: &BoundingBox3D) -> f64 {
    let (ax0, ay0, ax1, ay1) = a.bev_aabb();
    let (bx0, by0, bx1, by1) = b.bev_aabb();
    if ax1 < bx0 || bx1 < ax0 || ay1 < by0 || by1 < ay0 {
        return 0.0;
    }
    // symmetric by construction: order the pair canonically before clipping
    let (s, c) = if box_key(a) <= box_key(b) {
        (a, b)
    } else {
        (b, a)
    };
    let area = shoelace(&clip_convex(&s.bev_corners(), &c.bev_corners()));
    area.min(a.dx * a.dy).min(b.dx * b.dy).max(0.0)
}

fn box_key(b: &BoundingBox3D) -> [u64; 7] {
    [b.cx, b.cy, b.cz, b.dx, b.dy, b.dz, b.yaw].map(|v| v.to_bits())
}

/// 3D intersection-over-union of two yaw-only boxes.
pub fn iou3d(a: &BoundingBox3D, b: &BoundingBox3D) -> f64 {
    let (az0, az1) = a.z_interval();
    let (bz0, bz1) = b.z_interval();
    let dz = (az1.min(bz1) - az0.max(bz0)).max(0.0);
    if dz <= 0.0 {
        return 0.0;
    }
    if a == b {
        return 1.0;
    }
    let inter = bev_overlap_area(a, b) * dz;
    if inter <= 0.0 {
        return 0.0;
    }
    let union = a.volume() + b.volume() - inter;
    (inter / union).clamp(0.0, 1.0)
}
