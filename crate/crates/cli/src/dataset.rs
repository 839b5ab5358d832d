//! Binary volume container.
//!
//! Layout: `XCT1`, dtype code (u8), role code (u8), ndim (u8), then `ndim`
//! little-endian u32 dimensions and a row-major little-endian payload.
//! Volumes are always written with three dimensions; two-dimensional files
//! are read as a single slice.

use std::fs;
use std::path::Path;

use anyhow::{bail, ensure, Context, Result};
use half::f16;
use xct_core::geometry::{Volume, VolumeRole};
use xct_core::precision::DType;

pub const MAGIC: &[u8; 4] = b"XCT1";

pub fn encode(volume: &Volume) -> Vec<u8> {
    let shape = volume.shape();
    let dtype = volume.dtype();
    let mut out = Vec::with_capacity(7 + 12 + volume.data().len() * dtype.width());
    out.extend_from_slice(MAGIC);
    out.push(dtype.code());
    out.push(volume.role().code());
    out.push(shape.len() as u8);
    for d in shape {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in volume.data() {
        match dtype {
            DType::F64 => out.extend_from_slice(&v.to_le_bytes()),
            DType::F32 => out.extend_from_slice(&(v as f32).to_le_bytes()),
            DType::F16 => out.extend_from_slice(&f16::from_f64(v).to_bits().to_le_bytes()),
        }
    }
    out
}

pub fn decode(bytes: &[u8]) -> Result<Volume> {
    ensure!(bytes.len() >= 7, "truncated header ({} bytes)", bytes.len());
    ensure!(&bytes[..4] == MAGIC, "bad magic {:?}", &bytes[..4]);
    let dtype =
        DType::from_code(bytes[4]).with_context(|| format!("unknown dtype code {}", bytes[4]))?;
    let role = VolumeRole::from_code(bytes[5])
        .with_context(|| format!("unknown role code {}", bytes[5]))?;
    let ndim = bytes[6] as usize;
    if !(2..=3).contains(&ndim) {
        bail!("unsupported rank {ndim}");
    }
    let header = 7 + 4 * ndim;
    ensure!(bytes.len() >= header, "truncated dimensions");
    let mut shape = [1usize; 3];
    for i in 0..ndim {
        let off = 7 + 4 * i;
        let d = u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap());
        shape[3 - ndim + i] = d as usize;
    }
    let count: usize = shape.iter().product();
    let payload = &bytes[header..];
    ensure!(
        payload.len() == count * dtype.width(),
        "payload of {} bytes, expected {} for shape {shape:?} of {dtype:?}",
        payload.len(),
        count * dtype.width()
    );
    let data: Vec<f64> = match dtype {
        DType::F64 => payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect(),
        DType::F32 => payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect(),
        DType::F16 => payload
            .chunks_exact(2)
            .map(|c| f16::from_bits(u16::from_le_bytes([c[0], c[1]])).to_f64())
            .collect(),
    };
    Ok(Volume::new(shape, dtype, role, data)?)
}

pub fn write_volume(path: &Path, volume: &Volume) -> Result<()> {
    fs::write(path, encode(volume)).with_context(|| format!("writing {}", path.display()))
}

pub fn read_volume(path: &Path) -> Result<Volume> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    decode(&bytes).with_context(|| format!("decoding {}", path.display()))
}
