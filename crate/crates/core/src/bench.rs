//! Per-stage timing of the rescoring path.

use std::fmt::Write as _;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::features::extract_frame_features;
use crate::features::{all_neighbors, instance_matrix, points_in_boxes, FrameFeatures, PairSet};
use crate::infer::Rescorer;
use crate::net::GaceModel;
use crate::par;
use crate::trainer::Frame;

pub const STAGES: [&str; 6] = [
    "points-in-box query",
    "geometric & statistical features",
    "neighbor query",
    "H_I",
    "H_C",
    "H_F",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageTiming {
    pub stage: String,
    pub mean_ms: f64,
    pub p95_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub stages: Vec<StageTiming>,
    pub overall: StageTiming,
    /// Frames per second of one stream (1000 / mean overall ms).
    pub fps: f64,
    /// Frames per second with frames spread over the worker pool.
    pub fps_parallel: f64,
    pub threads: usize,
    pub frames: usize,
    pub mean_detections: f64,
    pub mean_points: f64,
}

impl BenchReport {
    pub fn table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:<34} {:>9} {:>9}", "stage", "mean ms", "p95 ms");
        for t in self.stages.iter().chain(std::iter::once(&self.overall)) {
            let _ = writeln!(s, "{:<34} {:>9.3} {:>9.3}", t.stage, t.mean_ms, t.p95_ms);
        }
        let _ = writeln!(
            s,
            "fps {:.1} (one stream), {:.1} ({} threads); {} frames, {:.0} detections, {:.0} points per frame",
            self.fps, self.fps_parallel, self.threads, self.frames, self.mean_detections, self.mean_points
        );
        s
    }
}

/// Seconds spent in each of [`STAGES`] for one frame.
pub fn time_stages(model: &GaceModel, net: &Rescorer, frame: &Frame) -> [f64; 6] {
    let dets = &frame.detections;
    let pts = &frame.points.points;
    let norm = &model.norm;
    let mut t = [0.0; 6];
    let mut clock = Instant::now();
    let mut lap = |slot: &mut f64| {
        let now = Instant::now();
        *slot = (now - clock).as_secs_f64();
        clock = now;
    };
    let inside = points_in_boxes(pts, dets);
    lap(&mut t[0]);
    let instance = instance_matrix(dets, pts, &inside, norm);
    lap(&mut t[1]);
    let lists = all_neighbors(dets, norm.radius);
    let pairs = PairSet::from_lists(dets, &lists, norm);
    lap(&mut t[2]);
    let feats = FrameFeatures { instance, pairs };
    let f_i = net.instance_embeddings(&feats);
    lap(&mut t[3]);
    let pooled = net.pooled_context(&feats, &f_i);
    lap(&mut t[4]);
    let outs = net.fuse(&f_i, &pooled);
    std::hint::black_box(&outs);
    lap(&mut t[5]);
    t
}

fn summary(stage: &str, mut secs: Vec<f64>) -> StageTiming {
    secs.sort_by(f64::total_cmp);
    let n = secs.len().max(1);
    let mean = secs.iter().sum::<f64>() / n as f64;
    let p95 = secs
        .get(((0.95 * n as f64).ceil() as usize).saturating_sub(1))
        .copied()
        .unwrap_or(0.0);
    StageTiming {
        stage: stage.to_string(),
        mean_ms: 1e3 * mean,
        p95_ms: 1e3 * p95,
    }
}

fn rescore(model: &GaceModel, net: &Rescorer, f: &Frame) -> Vec<f64> {
    net.scores(&extract_frame_features(
        &f.detections,
        &f.points.points,
        &model.norm,
    ))
}

/// Times every frame `repeats` times after one warm-up pass.
pub fn run(model: &GaceModel, frames: &[Frame], repeats: usize) -> BenchReport {
    let net = Rescorer::new(model);
    let rescore = |f: &Frame| rescore(model, &net, f);
    for f in frames {
        std::hint::black_box(rescore(f));
    }
    let mut per_stage: Vec<Vec<f64>> = vec![Vec::new(); STAGES.len()];
    let mut overall = Vec::new();
    for _ in 0..repeats.max(1) {
        for f in frames {
            let t = time_stages(model, &net, f);
            for (k, v) in t.iter().enumerate() {
                per_stage[k].push(*v);
            }
            let start = Instant::now();
            std::hint::black_box(rescore(f));
            overall.push(start.elapsed().as_secs_f64());
        }
    }
    let overall = summary("overall", overall);
    let start = Instant::now();
    for _ in 0..repeats.max(1) {
        std::hint::black_box(par::map(frames, |f| rescore(f)));
    }
    let wall = start.elapsed().as_secs_f64();
    let n = frames.len().max(1) as f64;
    BenchReport {
        stages: STAGES
            .iter()
            .zip(per_stage)
            .map(|(name, secs)| summary(name, secs))
            .collect(),
        fps: if overall.mean_ms > 0.0 {
            1e3 / overall.mean_ms
        } else {
            0.0
        },
        fps_parallel: if wall > 0.0 {
            n * repeats.max(1) as f64 / wall
        } else {
            0.0
        },
        overall,
        threads: par::threads(),
        frames: frames.len(),
        mean_detections: frames.iter().map(|f| f.detections.len()).sum::<usize>() as f64 / n,
        mean_points: frames.iter().map(|f| f.points.len()).sum::<usize>() as f64 / n,
    }
}
