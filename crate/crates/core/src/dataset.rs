//! On-disk datasets.
//!
//! ```text
//! <dir>/manifest.json
//! <dir>/frames/<id>.bin       little-endian f32 points, row-major N x C
//! <dir>/frames/<id>.det.txt   class cx cy cz dx dy dz yaw score
//! <dir>/frames/<id>.gt.txt    class cx cy cz dx dy dz yaw
//! <dir>/frames/<id>.label.txt u v       (one line per detection)
//! ```
//!
//! Prediction directories written by `rescore` carry the manifest and the
//! `.det.txt` files only.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{BoundingBox3D, Point, PointCloud};
use crate::supervision::{Detection, GroundTruth, LabeledDetection};
use crate::trainer::Frame;

pub const DATASET_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: bad manifest: {msg}")]
    Manifest { path: PathBuf, msg: String },
    #[error("{path}: truncated point record at byte offset {offset}")]
    Truncated { path: PathBuf, offset: u64 },
    #[error("{path}: holds {found}-channel points but the manifest declares {expected}")]
    Channels {
        path: PathBuf,
        expected: usize,
        found: usize,
    },
    #[error("{path}: holds {found} points, manifest lists {expected}")]
    PointCount {
        path: PathBuf,
        expected: usize,
        found: usize,
    },
    #[error("{path}:{line}: unknown class {name:?}")]
    UnknownClass {
        path: PathBuf,
        line: usize,
        name: String,
    },
    #[error("{path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },
    #[error("unknown frame {0}")]
    UnknownFrame(String),
    #[error("invalid frame id {0:?}")]
    FrameId(String),
}

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> DatasetError + '_ {
    move |source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameEntry {
    pub id: String,
    /// Point count of the binary file; 0 for prediction-only directories.
    pub points: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub version: u32,
    pub channels: usize,
    pub class_names: Vec<String>,
    pub frames: Vec<FrameEntry>,
    pub seed: Option<u64>,
    /// Hex digest of the generating configuration, if any.
    pub config_digest: Option<String>,
}

impl DatasetManifest {
    pub fn new(channels: usize, class_names: Vec<String>) -> Self {
        Self {
            version: DATASET_FORMAT_VERSION,
            channels,
            class_names,
            frames: Vec::new(),
            seed: None,
            config_digest: None,
        }
    }

    pub fn class_id(&self, name: &str) -> Option<usize> {
        self.class_names.iter().position(|c| c == name)
    }

    pub fn frame_ids(&self) -> impl Iterator<Item = &str> {
        self.frames.iter().map(|f| f.id.as_str())
    }
}

fn valid_id(id: &str) -> bool {
    !id.is_empty()
        && id != "."
        && id != ".."
        && id
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || matches!(c, '_' | '-' | '.'))
}

/// A dataset directory opened for reading.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub root: PathBuf,
    pub manifest: DatasetManifest,
}

impl Dataset {
    pub fn open(root: &Path) -> Result<Self, DatasetError> {
        let path = root.join("manifest.json");
        let text = fs::read_to_string(&path).map_err(io(&path))?;
        let manifest: DatasetManifest =
            serde_json::from_str(&text).map_err(|e| DatasetError::Manifest {
                path: path.clone(),
                msg: e.to_string(),
            })?;
        let bad = |msg: String| DatasetError::Manifest {
            path: path.clone(),
            msg,
        };
        if manifest.version != DATASET_FORMAT_VERSION {
            return Err(bad(format!("unsupported version {}", manifest.version)));
        }
        if manifest.channels != 4 && manifest.channels != 5 {
            return Err(bad(format!(
                "channel count must be 4 or 5, got {}",
                manifest.channels
            )));
        }
        if let Some(f) = manifest.frames.iter().find(|f| !valid_id(&f.id)) {
            return Err(DatasetError::FrameId(f.id.clone()));
        }
        Ok(Self {
            root: root.to_path_buf(),
            manifest,
        })
    }

    fn file(&self, id: &str, ext: &str) -> PathBuf {
        self.root.join("frames").join(format!("{id}.{ext}"))
    }

    fn entry(&self, id: &str) -> Result<&FrameEntry, DatasetError> {
        self.manifest
            .frames
            .iter()
            .find(|f| f.id == id)
            .ok_or_else(|| DatasetError::UnknownFrame(id.to_string()))
    }

    pub fn read_points(&self, id: &str) -> Result<PointCloud, DatasetError> {
        let expected = self.entry(id)?.points;
        let path = self.file(id, "bin");
        let bytes = fs::read(&path).map_err(io(&path))?;
        decode_points(&path, &bytes, self.manifest.channels, expected)
    }

    pub fn read_detections(&self, id: &str) -> Result<Option<Vec<Detection>>, DatasetError> {
        let path = self.file(id, "det.txt");
        read_optional(&path)?
            .map(|t| parse_records(&path, &t, &self.manifest.class_names, true))
            .transpose()
            .map(|o| {
                o.map(|v| {
                    v.into_iter()
                        .map(|(class_id, bbox, score)| Detection {
                            bbox,
                            class_id,
                            score,
                        })
                        .collect()
                })
            })
    }

    pub fn read_ground_truth(&self, id: &str) -> Result<Option<Vec<GroundTruth>>, DatasetError> {
        let path = self.file(id, "gt.txt");
        read_optional(&path)?
            .map(|t| parse_records(&path, &t, &self.manifest.class_names, false))
            .transpose()
            .map(|o| {
                o.map(|v| {
                    v.into_iter()
                        .map(|(class_id, bbox, _)| GroundTruth { bbox, class_id })
                        .collect()
                })
            })
    }

    pub fn read_labels(&self, id: &str) -> Result<Option<Vec<(bool, f64)>>, DatasetError> {
        let path = self.file(id, "label.txt");
        let Some(text) = read_optional(&path)? else {
            return Ok(None);
        };
        let mut out = Vec::new();
        for (k, line) in text
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty())
        {
            let perr = |msg: String| DatasetError::Parse {
                path: path.clone(),
                line: k + 1,
                msg,
            };
            let mut it = line.split_whitespace();
            let u = match it.next() {
                Some("1") => true,
                Some("0") => false,
                other => return Err(perr(format!("bad label {other:?}"))),
            };
            let v: f64 = it
                .next()
                .ok_or_else(|| perr("missing IoU".into()))?
                .parse()
                .map_err(|e| perr(format!("{e}")))?;
            out.push((u, v));
        }
        Ok(Some(out))
    }

    /// Points, detections (empty when absent) and ground truth if present.
    pub fn read_frame(&self, id: &str) -> Result<Frame, DatasetError> {
        Ok(Frame {
            frame_id: id.to_string(),
            points: self.read_points(id)?,
            detections: self.read_detections(id)?.unwrap_or_default(),
            ground_truth: self.read_ground_truth(id)?,
        })
    }

    pub fn write_labels(&self, id: &str, labels: &[LabeledDetection]) -> Result<(), DatasetError> {
        let mut s = String::new();
        for l in labels {
            let _ = writeln!(s, "{} {}", l.u as u8, l.v);
        }
        let path = self.file(id, "label.txt");
        fs::write(&path, s).map_err(io(&path))
    }
}

fn read_optional(path: &Path) -> Result<Option<String>, DatasetError> {
    match fs::read_to_string(path) {
        Ok(t) => Ok(Some(t)),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
        Err(e) => Err(io(path)(e)),
    }
}

pub fn decode_points(
    path: &Path,
    bytes: &[u8],
    channels: usize,
    expected: usize,
) -> Result<PointCloud, DatasetError> {
    let rec = 4 * channels;
    if !bytes.len().is_multiple_of(rec) {
        let other = if channels == 4 { 5 } else { 4 };
        if bytes.len() == expected * 4 * other {
            return Err(DatasetError::Channels {
                path: path.to_path_buf(),
                expected: channels,
                found: other,
            });
        }
        return Err(DatasetError::Truncated {
            path: path.to_path_buf(),
            offset: (bytes.len() - bytes.len() % rec) as u64,
        });
    }
    let n = bytes.len() / rec;
    if n != expected {
        let other = if channels == 4 { 5 } else { 4 };
        if bytes.len() == expected * 4 * other {
            return Err(DatasetError::Channels {
                path: path.to_path_buf(),
                expected: channels,
                found: other,
            });
        }
        return Err(DatasetError::PointCount {
            path: path.to_path_buf(),
            expected,
            found: n,
        });
    }
    let f = |c: &[u8]| f32::from_le_bytes(c.try_into().unwrap());
    let points = bytes
        .chunks_exact(rec)
        .map(|r| {
            Point::new(
                f(&r[0..4]),
                f(&r[4..8]),
                f(&r[8..12]),
                f(&r[12..16]),
                if channels == 5 { f(&r[16..20]) } else { 0.0 },
            )
        })
        .collect();
    Ok(PointCloud::new(points, channels == 5))
}

pub fn encode_points(points: &[Point], channels: usize) -> Vec<u8> {
    let mut b = Vec::with_capacity(points.len() * 4 * channels);
    for p in points {
        let vals = [p.x, p.y, p.z, p.intensity, p.elongation];
        for v in &vals[..channels] {
            b.extend_from_slice(&v.to_le_bytes());
        }
    }
    b
}

type Record = (usize, BoundingBox3D, f64);

fn parse_records(
    path: &Path,
    text: &str,
    classes: &[String],
    scored: bool,
) -> Result<Vec<Record>, DatasetError> {
    let want = if scored { 9 } else { 8 };
    let mut out = Vec::new();
    for (k, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let perr = |msg: String| DatasetError::Parse {
            path: path.to_path_buf(),
            line: k + 1,
            msg,
        };
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != want {
            return Err(perr(format!(
                "expected {want} fields, found {}",
                fields.len()
            )));
        }
        let class_id = classes.iter().position(|c| c == fields[0]).ok_or_else(|| {
            DatasetError::UnknownClass {
                path: path.to_path_buf(),
                line: k + 1,
                name: fields[0].to_string(),
            }
        })?;
        let mut v = [0.0; 8];
        for (slot, f) in v.iter_mut().zip(&fields[1..]) {
            *slot = f.parse().map_err(|e| perr(format!("{f:?}: {e}")))?;
        }
        let bbox = BoundingBox3D::new([v[0], v[1], v[2]], [v[3], v[4], v[5]], v[6])
            .map_err(|e| perr(e.to_string()))?;
        let score = if scored { v[7] } else { 1.0 };
        if scored && !(0.0..=1.0).contains(&score) {
            return Err(perr(format!("score {score} outside [0, 1]")));
        }
        out.push((class_id, bbox, score));
    }
    Ok(out)
}

fn box_fields(s: &mut String, b: &BoundingBox3D) {
    let _ = write!(
        s,
        "{} {} {} {} {} {} {}",
        b.cx, b.cy, b.cz, b.dx, b.dy, b.dz, b.yaw
    );
}

pub fn format_detections(dets: &[Detection], classes: &[String]) -> String {
    let mut s = String::new();
    for d in dets {
        s.push_str(&classes[d.class_id]);
        s.push(' ');
        box_fields(&mut s, &d.bbox);
        let _ = writeln!(s, " {}", d.score);
    }
    s
}

pub fn format_ground_truth(gts: &[GroundTruth], classes: &[String]) -> String {
    let mut s = String::new();
    for g in gts {
        s.push_str(&classes[g.class_id]);
        s.push(' ');
        box_fields(&mut s, &g.bbox);
        s.push('\n');
    }
    s
}

/// Builds a dataset directory frame by frame; the manifest is written by
/// [`DatasetWriter::finish`].
#[derive(Debug)]
pub struct DatasetWriter {
    root: PathBuf,
    manifest: DatasetManifest,
}

impl DatasetWriter {
    pub fn create(root: &Path, manifest: DatasetManifest) -> Result<Self, DatasetError> {
        let frames = root.join("frames");
        fs::create_dir_all(&frames).map_err(io(&frames))?;
        Ok(Self {
            root: root.to_path_buf(),
            manifest: DatasetManifest {
                frames: Vec::new(),
                ..manifest
            },
        })
    }

    pub fn manifest(&self) -> &DatasetManifest {
        &self.manifest
    }

    fn file(&self, id: &str, ext: &str) -> PathBuf {
        self.root.join("frames").join(format!("{id}.{ext}"))
    }

    fn push_id(&mut self, id: &str, points: usize) -> Result<(), DatasetError> {
        if !valid_id(id) {
            return Err(DatasetError::FrameId(id.to_string()));
        }
        self.manifest.frames.push(FrameEntry {
            id: id.to_string(),
            points,
        });
        Ok(())
    }

    pub fn write_frame(&mut self, frame: &Frame) -> Result<(), DatasetError> {
        let c = self.manifest.channels;
        if frame.points.channels() < c {
            return Err(DatasetError::Channels {
                path: self.file(&frame.frame_id, "bin"),
                expected: c,
                found: frame.points.channels(),
            });
        }
        self.push_id(&frame.frame_id, frame.points.len())?;
        let p = self.file(&frame.frame_id, "bin");
        fs::write(&p, encode_points(&frame.points.points, c)).map_err(io(&p))?;
        let p = self.file(&frame.frame_id, "det.txt");
        fs::write(
            &p,
            format_detections(&frame.detections, &self.manifest.class_names),
        )
        .map_err(io(&p))?;
        if let Some(gts) = &frame.ground_truth {
            let p = self.file(&frame.frame_id, "gt.txt");
            fs::write(&p, format_ground_truth(gts, &self.manifest.class_names)).map_err(io(&p))?;
        }
        Ok(())
    }

    /// Detections only, for prediction directories.
    pub fn write_detections(&mut self, id: &str, dets: &[Detection]) -> Result<(), DatasetError> {
        self.push_id(id, 0)?;
        let p = self.file(id, "det.txt");
        fs::write(&p, format_detections(dets, &self.manifest.class_names)).map_err(io(&p))
    }

    pub fn finish(self) -> Result<Dataset, DatasetError> {
        let path = self.root.join("manifest.json");
        let text = serde_json::to_string_pretty(&self.manifest).expect("manifest serializes");
        fs::write(&path, text + "\n").map_err(io(&path))?;
        Ok(Dataset {
            root: self.root,
            manifest: self.manifest,
        })
    }
}
