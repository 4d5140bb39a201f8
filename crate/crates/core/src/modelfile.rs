//! Binary model files. Little-endian throughout; parameters are stored as
//! `f32` so a saved model reloads to exactly the values it was saved with.
//!
//! ```text
//! "GACE" u32 version
//! u64 seed  u8 feature-group bits  u8 context  u8 detach
//! norm: f64 max_range, f64 z0, f64 z1, 3 x f64 max_dims, u32 max_points,
//!       f64 radius, u32 class_count, u8 channel bits, u8 use_elongation
//! 3 x mlp (instance, context, fusion):
//!   u32 layers, per layer: u32 in, u32 out, u8 activation,
//!   out*in f32 weights (row-major), out f32 bias
//! ```

use std::io::{Read, Write};
use std::path::Path;

use ndarray::{Array1, Array2};
use thiserror::Error;

use crate::features::{FeatureGroups, NormConfig};
use crate::geometry::ChannelSet;
use crate::net::{Activation, Branches, GaceModel, Layer, Mlp, MODEL_FORMAT_VERSION};

const MAGIC: &[u8; 4] = b"GACE";
/// Refuse layer sizes beyond this when reading untrusted files.
const MAX_WIDTH: u32 = 1 << 16;

#[derive(Debug, Error)]
pub enum ModelFileError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a model file")]
    BadMagic,
    #[error("unsupported model format version {0}")]
    Version(u32),
    #[error("corrupt model file: {0}")]
    Corrupt(String),
}

pub fn to_bytes(model: &GaceModel) -> Vec<u8> {
    let mut b = Vec::new();
    b.extend_from_slice(MAGIC);
    b.extend_from_slice(&MODEL_FORMAT_VERSION.to_le_bytes());
    b.extend_from_slice(&model.seed.to_le_bytes());
    b.push(model.groups.bits());
    b.push(model.branches.context as u8);
    b.push(model.branches.detach_neighbors as u8);
    let n = &model.norm;
    for v in [
        n.max_range,
        n.z_range[0],
        n.z_range[1],
        n.max_dims[0],
        n.max_dims[1],
        n.max_dims[2],
    ] {
        b.extend_from_slice(&v.to_le_bytes());
    }
    b.extend_from_slice(&n.max_points.to_le_bytes());
    b.extend_from_slice(&n.radius.to_le_bytes());
    b.extend_from_slice(&(n.class_count as u32).to_le_bytes());
    b.push(n.stats_channels.bits());
    b.push(n.use_elongation as u8);
    for mlp in [&model.instance, &model.context, &model.fusion] {
        b.extend_from_slice(&(mlp.layers.len() as u32).to_le_bytes());
        for l in &mlp.layers {
            b.extend_from_slice(&(l.input_len() as u32).to_le_bytes());
            b.extend_from_slice(&(l.output_len() as u32).to_le_bytes());
            b.push(l.activation.tag());
            for w in l.weight.iter().chain(l.bias.iter()) {
                b.extend_from_slice(&(*w as f32).to_le_bytes());
            }
        }
    }
    b
}

struct Cursor<'a> {
    b: &'a [u8],
    at: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], ModelFileError> {
        let end = self
            .at
            .checked_add(n)
            .filter(|e| *e <= self.b.len())
            .ok_or_else(|| ModelFileError::Corrupt(format!("truncated at byte {}", self.at)))?;
        let s = &self.b[self.at..end];
        self.at = end;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8, ModelFileError> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32, ModelFileError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64, ModelFileError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f64(&mut self) -> Result<f64, ModelFileError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f32s(&mut self, n: usize) -> Result<Vec<f64>, ModelFileError> {
        let raw = self.take(n * 4)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect())
    }
    fn flag(&mut self) -> Result<bool, ModelFileError> {
        match self.u8()? {
            0 => Ok(false),
            1 => Ok(true),
            v => Err(ModelFileError::Corrupt(format!("bad flag {v}"))),
        }
    }
}

pub fn from_bytes(bytes: &[u8]) -> Result<GaceModel, ModelFileError> {
    let mut c = Cursor { b: bytes, at: 0 };
    if c.take(4).map_err(|_| ModelFileError::BadMagic)? != MAGIC {
        return Err(ModelFileError::BadMagic);
    }
    let version = c.u32()?;
    if version != MODEL_FORMAT_VERSION {
        return Err(ModelFileError::Version(version));
    }
    let seed = c.u64()?;
    let groups = FeatureGroups::from_bits(c.u8()?);
    let branches = Branches {
        context: c.flag()?,
        detach_neighbors: c.flag()?,
    };
    let norm = NormConfig {
        max_range: c.f64()?,
        z_range: [c.f64()?, c.f64()?],
        max_dims: [c.f64()?, c.f64()?, c.f64()?],
        max_points: c.u32()?,
        radius: c.f64()?,
        class_count: c.u32()? as usize,
        stats_channels: ChannelSet::from_bits(c.u8()?),
        use_elongation: c.flag()?,
    };
    norm.validate()
        .map_err(|e| ModelFileError::Corrupt(e.to_string()))?;
    let mut mlps = Vec::with_capacity(3);
    for _ in 0..3 {
        let n = c.u32()?;
        if n == 0 || n > 16 {
            return Err(ModelFileError::Corrupt(format!("{n} layers")));
        }
        let mut layers = Vec::with_capacity(n as usize);
        for _ in 0..n {
            let (input, output) = (c.u32()?, c.u32()?);
            if input == 0 || output == 0 || input > MAX_WIDTH || output > MAX_WIDTH {
                return Err(ModelFileError::Corrupt(format!("layer {input}x{output}")));
            }
            let tag = c.u8()?;
            let activation = Activation::from_tag(tag)
                .ok_or_else(|| ModelFileError::Corrupt(format!("activation {tag}")))?;
            let (i, o) = (input as usize, output as usize);
            let weight = Array2::from_shape_vec((o, i), c.f32s(o * i)?).unwrap();
            let bias = Array1::from_vec(c.f32s(o)?);
            layers.push(Layer {
                weight,
                bias,
                activation,
            });
        }
        for w in layers.windows(2) {
            if w[0].output_len() != w[1].input_len() {
                return Err(ModelFileError::Corrupt("layer widths do not chain".into()));
            }
        }
        mlps.push(Mlp { layers });
    }
    if c.at != bytes.len() {
        return Err(ModelFileError::Corrupt(format!(
            "{} trailing bytes",
            bytes.len() - c.at
        )));
    }
    let fusion = mlps.pop().unwrap();
    let context = mlps.pop().unwrap();
    let instance = mlps.pop().unwrap();
    let e_i = instance.output_len();
    let e_c = context.output_len();
    if instance.input_len() != norm.instance_len()
        || context.input_len() != norm.neighbor_geometry_len() + e_i
        || fusion.input_len() != e_i + e_c
        || fusion.output_len() != 2
    {
        return Err(ModelFileError::Corrupt(
            "network shapes do not match the normalization config".into(),
        ));
    }
    Ok(GaceModel {
        instance,
        context,
        fusion,
        norm,
        groups,
        branches,
        seed,
    })
}

pub fn save(model: &GaceModel, path: &Path) -> Result<(), ModelFileError> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(&to_bytes(model))?;
    Ok(())
}

pub fn load(path: &Path) -> Result<GaceModel, ModelFileError> {
    let mut b = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut b)?;
    from_bytes(&b)
}
