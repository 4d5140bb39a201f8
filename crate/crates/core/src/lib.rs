//! Geometry-aware confidence re-estimation for black-box LiDAR 3D object
//! detectors.
//!
//! A detector is treated as a black box that emits oriented boxes, classes
//! and scores. A small network looks at each box, the LiDAR points inside it
//! and the other detections around it, and predicts a new confidence. The
//! crate covers the whole loop:
//!
//! 1. [`geometry`]: box containment, canonical point statistics, rotated IoU.
//! 2. [`supervision`]: TP/FP and IoU targets from ground truth.
//! 3. [`features`]: normalized instance and neighbor input vectors.
//! 4. [`net`]: encoders, max pooling, focal + L1 loss, gradients, Adam.
//! 5. [`trainer`]: feature caches, the training loop and rescoring.
//! 6. [`eval`]: PR curves, AP/APH, oracle gap, conditional precision.
//! 7. [`synth`]: a seeded synthetic benchmark with a simulated detector.
//! 8. [`dataset`] and [`modelfile`]: on-disk formats.
//!
//! [`infer`] is the single-precision scoring path used after training,
//! [`experiment`] strings training and evaluation together, and [`bench`]
//! times the scoring stages.
//!
//! Parallel loops go through [`par`], which uses rayon when the default
//! `parallel` feature is on. Results never depend on the thread count.

pub mod bench;
pub mod dataset;
pub mod eval;
pub mod experiment;
pub mod features;
pub mod geometry;
pub mod infer;
pub mod modelfile;
pub mod net;
pub mod par;
pub mod spatial;
pub mod supervision;
pub mod synth;
pub mod trainer;

pub use features::{FeatureGroups, NormConfig};
pub use geometry::{BoundingBox3D, Point, PointCloud};
pub use net::{GaceModel, LossConfig, ModelDims};
pub use supervision::{ClassThresholds, Detection, GroundTruth};
pub use trainer::{Frame, TrainConfig};
