//! `AVOL1` volume files.
//!
//! Layout: the line `AVOL1`, one line of JSON
//! `{"shape":[X,Y,Z,C],"dtype":"f32"|"u8","spacing":[sx,sy,sz]}`, then the raw
//! little-endian payload in row-major order (channel fastest).

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::SegmentationMask;
use crate::tensor::Tensor;

pub const MAGIC: &str = "AVOL1";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Dtype {
    F32,
    U8,
}

impl Dtype {
    pub fn name(self) -> &'static str {
        match self {
            Dtype::F32 => "f32",
            Dtype::U8 => "u8",
        }
    }

    fn parse(s: &str) -> Result<Self> {
        match s {
            "f32" => Ok(Dtype::F32),
            "u8" => Ok(Dtype::U8),
            other => Err(Error::UnknownDtype(other.to_string())),
        }
    }

    fn width(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::U8 => 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum VolumeData {
    F32(Vec<f32>),
    U8(Vec<u8>),
}

/// Multi-channel 3-D scalar grid with voxel spacing in millimetres.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    shape: [usize; 4],
    spacing: [f64; 3],
    data: VolumeData,
}

#[derive(Serialize, Deserialize)]
struct Header {
    shape: [usize; 4],
    dtype: String,
    spacing: [f64; 3],
}

impl Volume {
    pub fn new(shape: [usize; 4], spacing: [f64; 3], data: VolumeData) -> Result<Self> {
        let len = match &data {
            VolumeData::F32(v) => v.len(),
            VolumeData::U8(v) => v.len(),
        };
        if shape.iter().product::<usize>() != len {
            return Err(Error::Shape {
                op: "volume",
                lhs: shape.to_vec(),
                rhs: vec![len],
            });
        }
        if spacing.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(Error::Data(format!("spacing must be positive, got {spacing:?}")));
        }
        Ok(Volume { shape, spacing, data })
    }

    pub fn from_mask(mask: &SegmentationMask) -> Self {
        let [x, y, z] = mask.shape;
        Volume {
            shape: [x, y, z, 1],
            spacing: mask.spacing,
            data: VolumeData::U8(mask.labels.clone()),
        }
    }

    /// Single-precision copy of a `X×Y×Z×C` tensor.
    pub fn from_tensor(t: &Tensor, spacing: [f64; 3]) -> Result<Self> {
        let shape: [usize; 4] = t.shape().try_into().map_err(|_| Error::Shape {
            op: "volume from tensor",
            lhs: t.shape().to_vec(),
            rhs: vec![0; 4],
        })?;
        Volume::new(
            shape,
            spacing,
            VolumeData::F32(t.data().iter().map(|&v| v as f32).collect()),
        )
    }

    pub fn shape(&self) -> [usize; 4] {
        self.shape
    }

    pub fn spatial_shape(&self) -> [usize; 3] {
        [self.shape[0], self.shape[1], self.shape[2]]
    }

    pub fn channels(&self) -> usize {
        self.shape[3]
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
    }

    pub fn dtype(&self) -> Dtype {
        match self.data {
            VolumeData::F32(_) => Dtype::F32,
            VolumeData::U8(_) => Dtype::U8,
        }
    }

    pub fn data(&self) -> &VolumeData {
        &self.data
    }

    pub fn to_f64(&self) -> Vec<f64> {
        match &self.data {
            VolumeData::F32(v) => v.iter().map(|&x| x as f64).collect(),
            VolumeData::U8(v) => v.iter().map(|&x| x as f64).collect(),
        }
    }

    pub fn to_tensor(&self) -> Result<Tensor> {
        Tensor::new(self.shape.to_vec(), self.to_f64())
    }

    /// Label mask from a single-channel `u8` volume.
    pub fn to_mask(&self) -> Result<SegmentationMask> {
        match &self.data {
            VolumeData::U8(v) if self.shape[3] == 1 => {
                SegmentationMask::new(self.spatial_shape(), v.clone(), self.spacing)
            }
            _ => Err(Error::Data(format!(
                "mask volumes must be single-channel u8, got {} with {} channels",
                self.dtype().name(),
                self.shape[3]
            ))),
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let header = Header {
            shape: self.shape,
            dtype: self.dtype().name().to_string(),
            spacing: self.spacing,
        };
        let header = serde_json::to_string(&header).expect("header serializes");
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC.as_bytes());
        out.push(b'\n');
        out.extend_from_slice(header.as_bytes());
        out.push(b'\n');
        match &self.data {
            VolumeData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            VolumeData::U8(v) => out.extend_from_slice(v),
        }
        out
    }

    pub fn decode(bytes: &[u8], path: &Path) -> Result<Self> {
        let rest = bytes
            .strip_prefix(MAGIC.as_bytes())
            .and_then(|r| r.strip_prefix(b"\n"))
            .ok_or_else(|| Error::BadMagic {
                path: path.to_path_buf(),
                expected: MAGIC,
            })?;
        let header_err = |reason: String| Error::Header {
            path: path.to_path_buf(),
            reason,
        };
        let nl = rest
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| header_err("missing header line".into()))?;
        let header: Header = serde_json::from_slice(&rest[..nl]).map_err(|e| header_err(e.to_string()))?;
        let dtype = Dtype::parse(&header.dtype)?;
        let payload = &rest[nl + 1..];
        let expected = header.shape.iter().product::<usize>() * dtype.width();
        if payload.len() != expected {
            return Err(Error::LengthMismatch {
                path: path.to_path_buf(),
                expected,
                found: payload.len(),
            });
        }
        let data = match dtype {
            Dtype::F32 => VolumeData::F32(
                payload
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
            Dtype::U8 => VolumeData::U8(payload.to_vec()),
        };
        Volume::new(header.shape, header.spacing, data)
    }
}

pub fn read_volume(path: impl AsRef<Path>) -> Result<Volume> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Volume::decode(&bytes, path)
}

pub fn write_volume(path: impl AsRef<Path>, volume: &Volume) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, volume.encode()).map_err(|e| Error::io(path, e))
}
