//! Training-set construction from detector outputs, the epoch loop and
//! rescoring.

use std::time::Instant;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::features::{extract_frame_features, FeatureGroups, FrameFeatures, NormConfig, PairSet};
use crate::geometry::PointCloud;
use crate::infer::Rescorer;
use crate::net::FrameLabels;
use crate::net::{
    backward, gace_forward, Adam, AdamConfig, Branches, GaceModel, LossConfig, LossSums, ModelDims,
    ModelGrads,
};
use crate::par;
use crate::supervision::{assign_labels, ClassThresholds, Detection, GroundTruth, LabelError};

/// One LiDAR sweep with the detector's output and, for training, ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub frame_id: String,
    pub points: PointCloud,
    pub detections: Vec<Detection>,
    pub ground_truth: Option<Vec<GroundTruth>>,
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("frame {0} has no ground truth")]
    MissingGroundTruth(String),
    #[error("frame {frame}: {source}")]
    Label { frame: String, source: LabelError },
    #[error("frame {frame}: {source}")]
    Channels {
        frame: String,
        source: ChannelMismatch,
    },
    #[error("training set is empty")]
    EmptyStore,
    #[error("training set was built with a different normalization config")]
    NormMismatch,
    #[error("non-finite loss in epoch {epoch}, step {step} (frames {frames:?})")]
    Diverged {
        epoch: usize,
        step: usize,
        frames: Vec<String>,
    },
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("malformed feature cache: {0}")]
    Cache(String),
}

#[derive(Debug, Error, PartialEq)]
#[error("model expects {expected}-channel points, frame has {found} channels")]
pub struct ChannelMismatch {
    pub expected: usize,
    pub found: usize,
}

/// Points must carry elongation when the model consumes it; 5-channel
/// points are accepted by a 4-channel model (the channel is ignored).
pub fn check_channels(norm: &NormConfig, points: &PointCloud) -> Result<(), ChannelMismatch> {
    if norm.use_elongation
        && norm
            .stats_channels
            .contains(crate::geometry::StatChannel::Elongation)
        && !points.has_elongation
    {
        return Err(ChannelMismatch {
            expected: 5,
            found: points.channels(),
        });
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub lambda_iou: f64,
    pub radius: f64,
    /// Frames per optimizer step.
    pub batch: usize,
    pub seed: u64,
    pub thresholds: ClassThresholds,
    pub groups: FeatureGroups,
    pub branches: Branches,
    pub dims: ModelDims,
    pub focal_gamma: f64,
    pub focal_alpha: f64,
    /// Normalization ranges; `radius` above overrides `norm.radius`.
    pub norm: NormConfig,
}

impl TrainConfig {
    pub fn with_seed(seed: u64) -> Self {
        Self {
            epochs: 5,
            lr: 1e-3,
            lambda_iou: 0.5,
            radius: 40.0,
            batch: 8,
            seed,
            thresholds: ClassThresholds::default(),
            groups: FeatureGroups::all(),
            branches: Branches::default(),
            dims: ModelDims::default(),
            focal_gamma: 2.0,
            focal_alpha: 0.25,
            norm: NormConfig::default(),
        }
    }

    pub fn norm_config(&self) -> NormConfig {
        NormConfig {
            radius: self.radius,
            ..self.norm.clone()
        }
    }

    pub fn loss(&self) -> LossConfig {
        LossConfig {
            lambda_iou: self.lambda_iou,
            gamma: self.focal_gamma,
            alpha: self.focal_alpha,
        }
    }

    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.epochs == 0 {
            return Err(TrainError::Config("epochs must be >= 1".into()));
        }
        if self.batch == 0 {
            return Err(TrainError::Config("batch must be >= 1".into()));
        }
        if !(self.lr > 0.0) || !(self.lambda_iou >= 0.0) {
            return Err(TrainError::Config(
                "lr must be positive and lambda_iou non-negative".into(),
            ));
        }
        if !(self.focal_alpha > 0.0 && self.focal_alpha < 1.0) || !(self.focal_gamma >= 0.0) {
            return Err(TrainError::Config(
                "focal alpha must lie in (0,1), gamma >= 0".into(),
            ));
        }
        self.norm_config()
            .validate()
            .map_err(|e| TrainError::Config(e.to_string()))
    }
}

/// Cached features and targets of one frame.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledFrame {
    pub frame_id: String,
    pub features: FrameFeatures,
    pub labels: FrameLabels,
}

/// Extracted features for every training frame. Raw points are not kept.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSet {
    pub norm: NormConfig,
    pub frames: Vec<LabeledFrame>,
}

impl TrainingSet {
    pub fn samples(&self) -> usize {
        self.frames.iter().map(|f| f.labels.len()).sum()
    }
}

fn label_frame(
    frame: &Frame,
    norm: &NormConfig,
    thresholds: &ClassThresholds,
) -> Result<LabeledFrame, TrainError> {
    let gts = frame
        .ground_truth
        .as_ref()
        .ok_or_else(|| TrainError::MissingGroundTruth(frame.frame_id.clone()))?;
    check_channels(norm, &frame.points).map_err(|source| TrainError::Channels {
        frame: frame.frame_id.clone(),
        source,
    })?;
    let labeled =
        assign_labels(&frame.detections, gts, thresholds).map_err(|source| TrainError::Label {
            frame: frame.frame_id.clone(),
            source,
        })?;
    Ok(LabeledFrame {
        frame_id: frame.frame_id.clone(),
        features: extract_frame_features(&frame.detections, &frame.points.points, norm),
        labels: FrameLabels {
            u: labeled.iter().map(|l| l.u).collect(),
            v: labeled.iter().map(|l| l.v).collect(),
        },
    })
}

/// Frames processed together while streaming; bounds resident point clouds.
const BUILD_CHUNK: usize = 32;

/// Labels every frame and caches its features. Frames are consumed in
/// chunks so only a bounded number of point clouds is resident.
pub fn build_training_set<I, E>(
    frames: I,
    norm: &NormConfig,
    thresholds: &ClassThresholds,
) -> Result<TrainingSet, E>
where
    I: IntoIterator<Item = Result<Frame, E>>,
    E: From<TrainError>,
{
    let mut out = Vec::new();
    let mut chunk = Vec::with_capacity(BUILD_CHUNK);
    let flush = |chunk: &mut Vec<Frame>, out: &mut Vec<LabeledFrame>| -> Result<(), TrainError> {
        let done = par::map(chunk, |f| label_frame(f, norm, thresholds));
        chunk.clear();
        for r in done {
            out.push(r?);
        }
        Ok(())
    };
    for f in frames {
        chunk.push(f?);
        if chunk.len() == BUILD_CHUNK {
            flush(&mut chunk, &mut out)?;
        }
    }
    flush(&mut chunk, &mut out)?;
    Ok(TrainingSet {
        norm: norm.clone(),
        frames: out,
    })
}

/// Per-epoch training statistics.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub mean_total: f64,
    pub mean_focal: f64,
    pub mean_iou_l1: f64,
    pub wall_seconds: f64,
}

impl EpochLog {
    /// `epoch, mean_total_loss, mean_focal, mean_iou_l1, wall_seconds`, tab-separated.
    pub fn line(&self) -> String {
        format!(
            "{}\t{:.6}\t{:.6}\t{:.6}\t{:.3}",
            self.epoch, self.mean_total, self.mean_focal, self.mean_iou_l1, self.wall_seconds
        )
    }
}

/// Gradient of the batch objective (mean over the batch's detections).
/// Per-frame work runs in parallel; the reduction is in frame order.
pub fn batch_gradient(
    model: &GaceModel,
    frames: &[&LabeledFrame],
    loss: &LossConfig,
) -> Option<(ModelGrads, LossSums)> {
    let per_frame = par::map(frames, |f| {
        if f.labels.is_empty() {
            return None;
        }
        let cache = gace_forward(model, &f.features);
        Some(backward(model, &f.features, &cache, &f.labels, loss))
    });
    let mut total: Option<ModelGrads> = None;
    let mut sums = LossSums::default();
    for g in per_frame.into_iter().flatten() {
        sums.add(&g.loss);
        match total.as_mut() {
            Some(t) => t.add_assign(&g.params),
            None => total = Some(g.params),
        }
    }
    let mut grads = total?;
    grads.scale(1.0 / sums.count as f64);
    Some((grads, sums))
}

pub struct TrainOutcome {
    pub model: GaceModel,
    pub log: Vec<EpochLog>,
}

/// Trains a model end to end; `on_epoch` sees each epoch's statistics.
pub fn train_with_log(
    store: &TrainingSet,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    if store.frames.is_empty() || store.samples() == 0 {
        return Err(TrainError::EmptyStore);
    }
    if store.norm.digest() != cfg.norm_config().digest() {
        return Err(TrainError::NormMismatch);
    }
    let loss_cfg = cfg.loss();
    let mut model = GaceModel::new(
        store.norm.clone(),
        cfg.dims,
        cfg.groups,
        cfg.branches,
        cfg.seed,
    );
    let mut adam = Adam::new(
        &model,
        AdamConfig {
            lr: cfg.lr,
            ..Default::default()
        },
    );
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5e_edf4_a3e5);
    let mut order: Vec<usize> = (0..store.frames.len()).collect();
    let mut log = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        let start = Instant::now();
        order.shuffle(&mut rng);
        let mut epoch_sums = LossSums::default();
        for (step, chunk) in order.chunks(cfg.batch).enumerate() {
            let frames: Vec<&LabeledFrame> = chunk.iter().map(|&i| &store.frames[i]).collect();
            let Some((grads, sums)) = batch_gradient(&model, &frames, &loss_cfg) else {
                continue;
            };
            if !sums.total(loss_cfg.lambda_iou).is_finite() || !grads.is_finite() {
                return Err(TrainError::Diverged {
                    epoch,
                    step,
                    frames: frames.iter().map(|f| f.frame_id.clone()).collect(),
                });
            }
            adam.step(&mut model, &grads);
            epoch_sums.add(&sums);
        }
        let entry = EpochLog {
            epoch,
            mean_total: epoch_sums.total(loss_cfg.lambda_iou),
            mean_focal: epoch_sums.mean_focal(),
            mean_iou_l1: epoch_sums.mean_l1(),
            wall_seconds: start.elapsed().as_secs_f64(),
        };
        log::info!("epoch {}", entry.line());
        on_epoch(&entry);
        log.push(entry);
    }
    model.round_to_f32();
    Ok(TrainOutcome { model, log })
}

pub fn train(store: &TrainingSet, cfg: &TrainConfig) -> Result<GaceModel, TrainError> {
    train_with_log(store, cfg, |_| {}).map(|o| o.model)
}

/// New confidence per detection, in input order. Boxes and classes are
/// untouched.
pub fn rescore(model: &GaceModel, frame: &Frame) -> Result<Vec<f64>, ChannelMismatch> {
    check_channels(&model.norm, &frame.points)?;
    if frame.detections.is_empty() {
        return Ok(Vec::new());
    }
    let feats = extract_frame_features(&frame.detections, &frame.points.points, &model.norm);
    Ok(Rescorer::new(model).scores(&feats))
}

/// Rescores cached features (e.g. a held-out feature store).
pub fn rescore_features(model: &GaceModel, feats: &FrameFeatures) -> Vec<f64> {
    Rescorer::new(model).scores(feats)
}

const CACHE_MAGIC: &[u8; 8] = b"GACEFEAT";
const CACHE_VERSION: u32 = 1;

impl TrainingSet {
    /// Binary cache: header with the normalization digest, then per frame
    /// the id, instance matrix, pair structure and targets (little-endian).
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut b = Vec::new();
        b.extend_from_slice(CACHE_MAGIC);
        b.extend_from_slice(&CACHE_VERSION.to_le_bytes());
        b.extend_from_slice(&self.norm.digest());
        let norm_json = serde_json::to_vec(&self.norm).expect("norm serializes");
        put_u64(&mut b, norm_json.len() as u64);
        b.extend_from_slice(&norm_json);
        put_u64(&mut b, self.frames.len() as u64);
        for f in &self.frames {
            put_u64(&mut b, f.frame_id.len() as u64);
            b.extend_from_slice(f.frame_id.as_bytes());
            let (n, d) = f.features.instance.dim();
            put_u64(&mut b, n as u64);
            put_u64(&mut b, d as u64);
            for v in f.features.instance.iter() {
                b.extend_from_slice(&v.to_le_bytes());
            }
            let p = &f.features.pairs;
            put_u64(&mut b, p.neighbor.len() as u64);
            put_u64(&mut b, p.geometry.ncols() as u64);
            for o in &p.offsets {
                b.extend_from_slice(&o.to_le_bytes());
            }
            for j in &p.neighbor {
                b.extend_from_slice(&j.to_le_bytes());
            }
            for v in p.geometry.iter() {
                b.extend_from_slice(&v.to_le_bytes());
            }
            for (u, v) in f.labels.u.iter().zip(&f.labels.v) {
                b.push(*u as u8);
                b.extend_from_slice(&v.to_le_bytes());
            }
        }
        b
    }

    /// Parses a cache; `expected` rejects caches built with other
    /// normalization settings.
    pub fn from_bytes(bytes: &[u8], expected: Option<&NormConfig>) -> Result<Self, TrainError> {
        let mut r = Reader { b: bytes, pos: 0 };
        if r.take(8)? != CACHE_MAGIC {
            return Err(TrainError::Cache("bad magic".into()));
        }
        if r.u32()? != CACHE_VERSION {
            return Err(TrainError::Cache("unsupported version".into()));
        }
        let digest: [u8; 32] = r.take(32)?.try_into().expect("32 bytes");
        let json_len = r.u64()? as usize;
        let norm: NormConfig = serde_json::from_slice(r.take(json_len)?)
            .map_err(|e| TrainError::Cache(e.to_string()))?;
        if norm.digest() != digest {
            return Err(TrainError::Cache(
                "digest does not match header config".into(),
            ));
        }
        if let Some(exp) = expected {
            if exp.digest() != digest {
                return Err(TrainError::NormMismatch);
            }
        }
        let count = r.u64()? as usize;
        let mut frames = Vec::with_capacity(count.min(1 << 20));
        for _ in 0..count {
            let id_len = r.u64()? as usize;
            let frame_id = String::from_utf8(r.take(id_len)?.to_vec())
                .map_err(|e| TrainError::Cache(e.to_string()))?;
            let n = r.u64()? as usize;
            let d = r.u64()? as usize;
            let inst = (0..n * d).map(|_| r.f64()).collect::<Result<Vec<_>, _>>()?;
            let p = r.u64()? as usize;
            let g = r.u64()? as usize;
            let offsets = (0..=n).map(|_| r.u32()).collect::<Result<Vec<_>, _>>()?;
            let neighbor = (0..p).map(|_| r.u32()).collect::<Result<Vec<_>, _>>()?;
            let geo = (0..p * g).map(|_| r.f64()).collect::<Result<Vec<_>, _>>()?;
            let mut labels = FrameLabels::default();
            for _ in 0..n {
                labels.u.push(r.take(1)?[0] != 0);
                labels.v.push(r.f64()?);
            }
            let shape_err = |e: ndarray::ShapeError| TrainError::Cache(e.to_string());
            frames.push(LabeledFrame {
                frame_id,
                features: FrameFeatures {
                    instance: Array2::from_shape_vec((n, d), inst).map_err(shape_err)?,
                    pairs: PairSet {
                        offsets,
                        neighbor,
                        geometry: Array2::from_shape_vec((p, g), geo).map_err(shape_err)?,
                    },
                },
                labels,
            });
        }
        if r.pos != bytes.len() {
            return Err(TrainError::Cache("trailing bytes".into()));
        }
        Ok(Self { norm, frames })
    }
}

fn put_u64(b: &mut Vec<u8>, v: u64) {
    b.extend_from_slice(&v.to_le_bytes());
}

struct Reader<'a> {
    b: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], TrainError> {
        if self.pos + n > self.b.len() {
            return Err(TrainError::Cache(format!("truncated at byte {}", self.pos)));
        }
        let s = &self.b[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, TrainError> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    fn u64(&mut self) -> Result<u64, TrainError> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }

    fn f64(&mut self) -> Result<f64, TrainError> {
        Ok(f64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }
}
