//! Binary volume/stack files and their JSON sidecar.
//!
//! Both formats are a 64-byte little-endian header followed by `f32` samples:
//!
//! | bytes  | field                                        |
//! |--------|----------------------------------------------|
//! | 0..4   | magic, `CPV1` (volume) or `CPS1` (stack)     |
//! | 4..8   | `u32` nx                                     |
//! | 8..12  | `u32` ny                                     |
//! | 12..16 | `u32` nz (volume side, or 1 for a stack)     |
//! | 16..20 | `u32` count (1 for a volume, images in stack)|
//! | 20..24 | `f32` voxel/pixel size                       |
//! | 24..64 | reserved, zero                               |
//!
//! The stack sidecar (`<stack>.json`) carries the ground truth: rotations as
//! nine row-major floats per image, shifts as `[dx, dy]`, snr and seed.

use serde::{Deserialize, Serialize};
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use super::{Image, ProjectionStack, Rotation, Volume};
use crate::polarfft::ShiftVector;
use crate::{Error, Result};

pub const VOLUME_MAGIC: &[u8; 4] = b"CPV1";
pub const STACK_MAGIC: &[u8; 4] = b"CPS1";
const HEADER_LEN: usize = 64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StackMeta {
    pub side: usize,
    pub count: usize,
    pub rotations: Option<Vec<[f64; 9]>>,
    pub shifts: Option<Vec<[f64; 2]>>,
    pub snr: Option<f64>,
    pub seed: Option<u64>,
}

struct Header {
    dims: [u32; 3],
    count: u32,
    spacing: f32,
}

fn encode_header(magic: &[u8; 4], h: &Header) -> [u8; HEADER_LEN] {
    let mut buf = [0u8; HEADER_LEN];
    buf[0..4].copy_from_slice(magic);
    buf[4..8].copy_from_slice(&h.dims[0].to_le_bytes());
    buf[8..12].copy_from_slice(&h.dims[1].to_le_bytes());
    buf[12..16].copy_from_slice(&h.dims[2].to_le_bytes());
    buf[16..20].copy_from_slice(&h.count.to_le_bytes());
    buf[20..24].copy_from_slice(&h.spacing.to_le_bytes());
    buf
}

fn decode_header(bytes: &[u8], magic: &[u8; 4]) -> Result<Header> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::Format("file shorter than the 64-byte header".into()));
    }
    if &bytes[0..4] != magic {
        return Err(Error::Format(format!(
            "bad magic {:?}, expected {:?}",
            String::from_utf8_lossy(&bytes[0..4]),
            String::from_utf8_lossy(magic)
        )));
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
    Ok(Header {
        dims: [u32_at(4), u32_at(8), u32_at(12)],
        count: u32_at(16),
        spacing: f32::from_le_bytes(bytes[20..24].try_into().unwrap()),
    })
}

fn write_samples<'a>(path: &Path, header: [u8; HEADER_LEN], samples: impl Iterator<Item = &'a f64>) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    w.write_all(&header)?;
    for v in samples {
        w.write_all(&(*v as f32).to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

fn read_samples(bytes: &[u8], expected: usize) -> Result<Vec<f64>> {
    let body = &bytes[HEADER_LEN..];
    if body.len() != expected * 4 {
        return Err(Error::Format(format!(
            "payload has {} bytes, expected {}",
            body.len(),
            expected * 4
        )));
    }
    Ok(body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect())
}

pub fn write_volume(path: &Path, vol: &Volume) -> Result<()> {
    let s = vol.side() as u32;
    let header = encode_header(
        VOLUME_MAGIC,
        &Header {
            dims: [s, s, s],
            count: 1,
            spacing: vol.voxel_size() as f32,
        },
    );
    write_samples(path, header, vol.data().iter())
}

pub fn read_volume(path: &Path) -> Result<Volume> {
    let bytes = fs::read(path)?;
    let h = decode_header(&bytes, VOLUME_MAGIC)?;
    let [nx, ny, nz] = h.dims;
    if nx != ny || ny != nz || h.count != 1 {
        return Err(Error::Format(format!(
            "volume header dims {nx}x{ny}x{nz} count {} is not a single cube",
            h.count
        )));
    }
    let side = nx as usize;
    let data = read_samples(&bytes, side * side * side)?;
    Ok(Volume::new(side, data)?.with_voxel_size(h.spacing as f64))
}

/// Path of the JSON sidecar for a stack file.
pub fn sidecar_path(stack_path: &Path) -> PathBuf {
    stack_path.with_extension("json")
}

pub fn write_stack(path: &Path, stack: &ProjectionStack) -> Result<()> {
    let s = stack.side() as u32;
    let header = encode_header(
        STACK_MAGIC,
        &Header {
            dims: [s, s, 1],
            count: stack.len() as u32,
            spacing: 1.0,
        },
    );
    write_samples(path, header, stack.images().iter().flat_map(|im| im.data().iter()))?;
    let meta = StackMeta {
        side: stack.side(),
        count: stack.len(),
        rotations: stack
            .true_rotations
            .as_ref()
            .map(|r| r.iter().map(Rotation::to_row_major).collect()),
        shifts: stack.true_shifts.as_ref().map(|s| s.as_slice().to_vec()),
        snr: stack.snr,
        seed: stack.seed,
    };
    fs::write(sidecar_path(path), serde_json::to_string_pretty(&meta)?)?;
    Ok(())
}

/// Reads a stack; the sidecar is optional.
pub fn read_stack(path: &Path) -> Result<ProjectionStack> {
    let bytes = fs::read(path)?;
    let h = decode_header(&bytes, STACK_MAGIC)?;
    let [nx, ny, nz] = h.dims;
    if nx != ny || nz != 1 {
        return Err(Error::Format(format!(
            "stack images are {nx}x{ny}x{nz}, expected square 2D"
        )));
    }
    let side = nx as usize;
    let count = h.count as usize;
    let data = read_samples(&bytes, side * side * count)?;
    let images = data
        .chunks_exact(side * side)
        .map(|c| Image::new(side, c.to_vec()))
        .collect::<Result<Vec<_>>>()?;
    let mut stack = ProjectionStack::new(images)?;

    let meta_path = sidecar_path(path);
    if meta_path.exists() {
        let meta: StackMeta = serde_json::from_str(&fs::read_to_string(&meta_path)?)?;
        if meta.side != side || meta.count != count {
            return Err(Error::Format("stack sidecar disagrees with the header".into()));
        }
        if let Some(rots) = meta.rotations {
            if rots.len() != count {
                return Err(Error::Format("sidecar rotation count mismatch".into()));
            }
            stack.true_rotations = Some(rots.iter().map(Rotation::from_row_major).collect::<Result<Vec<_>>>()?);
        }
        if let Some(shifts) = meta.shifts {
            if shifts.len() != count {
                return Err(Error::Format("sidecar shift count mismatch".into()));
            }
            stack.true_shifts = Some(ShiftVector::new(shifts));
        }
        stack.snr = meta.snr;
        stack.seed = meta.seed;
    }
    Ok(stack)
}
