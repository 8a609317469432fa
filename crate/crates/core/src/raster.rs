//! The S4XR raster container — the bit-exact on-disk format for images,
//! feature maps, and label rasters.
//!
//! Layout, all multi-byte fields little-endian:
//!
//! ```text
//! offset  size  field
//! 0       4     magic "S4XR"
//! 4       1     version, currently 0x01
//! 5       1     dtype: 0x00 = f32 LE, 0x01 = u8
//! 6       1     ndim
//! 7       1     reserved, must be 0x00
//! 8       4*n   dims, u32 LE each
//! ...           row-major payload
//! ```

use crate::error::{Error, FormatError, Result};
use crate::tensor::Tensor;
use std::io::{Read, Write};
use std::path::Path;

const MAGIC: [u8; 4] = *b"S4XR";
const VERSION: u8 = 0x01;

/// In-memory raster: either float32 imagery or uint8 labels/masks.
#[derive(Clone, Debug, PartialEq)]
pub enum RasterTensor {
    F32(Tensor<f32>),
    U8 { shape: Vec<usize>, data: Vec<u8> },
}

impl RasterTensor {
    pub fn shape(&self) -> &[usize] {
        match self {
            RasterTensor::F32(t) => t.shape(),
            RasterTensor::U8 { shape, .. } => shape,
        }
    }

    pub fn dtype_name(&self) -> &'static str {
        match self {
            RasterTensor::F32(_) => "f32",
            RasterTensor::U8 { .. } => "u8",
        }
    }

    pub fn as_f32(&self) -> Result<&Tensor<f32>> {
        match self {
            RasterTensor::F32(t) => Ok(t),
            RasterTensor::U8 { .. } => Err(FormatError::DtypeMismatch {
                found: "u8",
                wanted: "f32",
            }
            .into()),
        }
    }

    pub fn as_u8(&self) -> Result<(&[usize], &[u8])> {
        match self {
            RasterTensor::U8 { shape, data } => Ok((shape, data)),
            RasterTensor::F32(_) => Err(FormatError::DtypeMismatch {
                found: "f32",
                wanted: "u8",
            }
            .into()),
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let shape = self.shape();
        let mut buf = Vec::with_capacity(8 + shape.len() * 4);
        buf.extend_from_slice(&MAGIC);
        buf.push(VERSION);
        buf.push(match self {
            RasterTensor::F32(_) => 0x00,
            RasterTensor::U8 { .. } => 0x01,
        });
        buf.push(shape.len() as u8);
        buf.push(0x00);
        for &d in shape {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        match self {
            RasterTensor::F32(t) => {
                buf.reserve(t.numel() * 4);
                for v in t.iter() {
                    buf.extend_from_slice(&v.to_le_bytes());
                }
            }
            RasterTensor::U8 { data, .. } => buf.extend_from_slice(data),
        }
        buf
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 8 || bytes[0..4] != MAGIC {
            return Err(FormatError::BadMagic.into());
        }
        if bytes[4] != VERSION {
            return Err(FormatError::BadVersion(bytes[4]).into());
        }
        let dtype = bytes[5];
        if dtype > 0x01 {
            return Err(FormatError::BadDtype(dtype).into());
        }
        let ndim = bytes[6] as usize;
        let header_len = 8 + ndim * 4;
        if bytes.len() < header_len {
            return Err(FormatError::Truncated {
                expected: header_len,
                got: bytes.len(),
            }
            .into());
        }
        let mut shape = Vec::with_capacity(ndim);
        let mut numel: usize = 1;
        for i in 0..ndim {
            let off = 8 + i * 4;
            let d = u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap()) as usize;
            numel = numel.checked_mul(d).ok_or(FormatError::DimOverflow)?;
            shape.push(d);
        }
        let elem = if dtype == 0x00 { 4 } else { 1 };
        let expected = header_len + numel * elem;
        if bytes.len() != expected {
            return Err(FormatError::Truncated {
                expected,
                got: bytes.len(),
            }
            .into());
        }
        let payload = &bytes[header_len..];
        Ok(match dtype {
            0x00 => {
                let data: Vec<f32> = payload
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                    .collect();
                RasterTensor::F32(Tensor::new(shape, data))
            }
            _ => RasterTensor::U8 {
                shape,
                data: payload.to_vec(),
            },
        })
    }
}

pub fn write_raster(raster: &RasterTensor, path: &Path) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(&raster.encode())?;
    Ok(())
}

pub fn read_raster(path: &Path) -> Result<RasterTensor> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?
        .read_to_end(&mut bytes)?;
    RasterTensor::decode(&bytes)
}

/// Convenience wrappers used throughout the pipeline.
pub fn write_f32(t: &Tensor<f32>, path: &Path) -> Result<()> {
    write_raster(&RasterTensor::F32(t.clone()), path)
}

pub fn read_f32(path: &Path) -> Result<Tensor<f32>> {
    Ok(read_raster(path)?.as_f32()?.clone())
}

pub fn write_u8(shape: &[usize], data: &[u8], path: &Path) -> Result<()> {
    write_raster(
        &RasterTensor::U8 {
            shape: shape.to_vec(),
            data: data.to_vec(),
        },
        path,
    )
}

pub fn read_u8(path: &Path) -> Result<(Vec<usize>, Vec<u8>)> {
    let r = read_raster(path)?;
    let (shape, data) = r.as_u8()?;
    Ok((shape.to_vec(), data.to_vec()))
}
