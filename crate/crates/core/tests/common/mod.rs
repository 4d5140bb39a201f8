#![allow(dead_code)]

pub mod oracles;

use gace::features::{extract_frame_features, FeatureGroups, FrameFeatures, NormConfig};
use gace::geometry::{BoundingBox3D, Point};
use gace::net::{
    backward, frame_loss, gace_forward, Branches, FrameLabels, GaceModel, LossConfig, ModelDims,
};
use gace::supervision::Detection;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const SMALL_DIMS: ModelDims = ModelDims {
    hidden: 8,
    instance_embed: 6,
    context_embed: 5,
};

/// Random detections (`2..=30`, spread up to 60 m) with up to 24 points
/// scattered inside each box.
pub fn random_scene<R: Rng>(rng: &mut R, class_count: usize) -> (Vec<Detection>, Vec<Point>) {
    let n = rng.random_range(2..=30);
    let spread = rng.random_range(8.0..60.0);
    let dets: Vec<Detection> = (0..n)
        .map(|_| Detection {
            bbox: BoundingBox3D::new(
                [
                    rng.random_range(-spread..spread),
                    rng.random_range(-spread..spread),
                    rng.random_range(-2.0..0.5),
                ],
                [
                    rng.random_range(0.6..6.0),
                    rng.random_range(0.5..2.5),
                    rng.random_range(1.0..2.5),
                ],
                rng.random_range(-3.2..3.2),
            )
            .unwrap(),
            class_id: rng.random_range(0..class_count),
            score: rng.random_range(0.05..0.95),
        })
        .collect();
    let mut points = Vec::new();
    for d in &dets {
        let k = rng.random_range(0..25);
        for _ in 0..k {
            let b = &d.bbox;
            let (s, c) = b.yaw.sin_cos();
            let lx = rng.random_range(-0.5..0.5) * b.dx;
            let ly = rng.random_range(-0.5..0.5) * b.dy;
            let lz = rng.random_range(-0.5..0.5) * b.dz;
            points.push(Point::new(
                (b.cx + c * lx - s * ly) as f32,
                (b.cy + s * lx + c * ly) as f32,
                (b.cz + lz) as f32,
                rng.random_range(0.0..1.0),
                rng.random_range(0.0..1.0),
            ));
        }
    }
    (dets, points)
}

/// A [`random_scene`] frame where every detection has at most ten
/// neighbors inside `norm.radius`, with random targets.
pub fn random_frame(seed: u64, norm: &NormConfig) -> (FrameFeatures, FrameLabels, usize) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    loop {
        let (dets, points) = random_scene(&mut rng, norm.class_count);
        let n = dets.len();
        let feats = extract_frame_features(&dets, &points, norm);
        let max_nb = (0..n)
            .map(|i| feats.pairs.range(i).len())
            .max()
            .unwrap_or(0);
        if max_nb > 10 {
            continue;
        }
        let labels = FrameLabels {
            u: (0..n).map(|_| rng.random_bool(0.4)).collect(),
            v: (0..n).map(|_| rng.random_range(0.0..1.0)).collect(),
        };
        return (feats, labels, max_nb);
    }
}

pub struct GradCheck {
    pub max_rel_error: f64,
    pub checked: usize,
    pub skipped_at_kinks: usize,
}

/// Floor on the relative-error denominator for vanishing gradients.
pub const REL_FLOOR: f64 = 1e-6;

/// Central differences with step `h` over every parameter, against the
/// analytic mean-loss gradient. Parameters whose perturbation flips a
/// rectifier, a pooling winner or a clamp are counted and skipped: the
/// difference quotient straddles a kink there.
#[allow(clippy::needless_range_loop)]
pub fn gradient_check(
    model: &GaceModel,
    feats: &FrameFeatures,
    labels: &FrameLabels,
    loss: &LossConfig,
    h: f64,
) -> GradCheck {
    let cache = gace_forward(model, feats);
    let base_sig = cache.kink_signature(labels);
    let g = backward(model, feats, &cache, labels, loss);
    let n = labels.len() as f64;
    let analytic: Vec<Vec<f64>> = g
        .params
        .slices()
        .iter()
        .map(|s| s.iter().map(|v| v / n).collect())
        .collect();
    let mut m = model.clone();
    let mut out = GradCheck {
        max_rel_error: 0.0,
        checked: 0,
        skipped_at_kinks: 0,
    };
    for t in 0..analytic.len() {
        for k in 0..analytic[t].len() {
            let orig = m.param_slices()[t][k];
            m.param_slices_mut()[t][k] = orig + h;
            let plus_sig = gace_forward(&m, feats).kink_signature(labels);
            let lp = frame_loss(&m, feats, labels, loss).unwrap();
            m.param_slices_mut()[t][k] = orig - h;
            let minus_sig = gace_forward(&m, feats).kink_signature(labels);
            let lm = frame_loss(&m, feats, labels, loss).unwrap();
            m.param_slices_mut()[t][k] = orig;
            if plus_sig != base_sig || minus_sig != base_sig {
                out.skipped_at_kinks += 1;
                continue;
            }
            let fd = (lp - lm) / (2.0 * h);
            let a = analytic[t][k];
            let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(REL_FLOOR);
            out.max_rel_error = out.max_rel_error.max(rel);
            out.checked += 1;
        }
    }
    out
}

pub fn small_model(norm: NormConfig, seed: u64) -> GaceModel {
    GaceModel::new(
        norm,
        SMALL_DIMS,
        FeatureGroups::all(),
        Branches::default(),
        seed,
    )
}
