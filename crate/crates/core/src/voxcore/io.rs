//! `PVX1` volume and `PGD1` porosity-grid files.
//!
//! Both share one layout: 4 magic bytes, little-endian `u32` extents
//! `nx, ny, nz`, one little-endian `f32` header value, then the payload in
//! `k`-fastest order. For volumes the header value is the voxel size in
//! micrometers and the payload is one phase byte per voxel. For porosity
//! grids the header value is the block size and the payload is `f32`.

use std::path::Path;

use super::{PorosityGrid, VoxError, Volume3D};

const VOLUME_MAGIC: &[u8; 4] = b"PVX1";
const GRID_MAGIC: &[u8; 4] = b"PGD1";
const HEADER_LEN: usize = 20;

fn header(magic: &[u8; 4], dims: [usize; 3], value: f32) -> Result<Vec<u8>, VoxError> {
    let mut buf = Vec::with_capacity(HEADER_LEN);
    buf.extend_from_slice(magic);
    for d in dims {
        let d = u32::try_from(d).map_err(|_| VoxError::Invalid(format!("extent {d} exceeds u32")))?;
        buf.extend_from_slice(&d.to_le_bytes());
    }
    buf.extend_from_slice(&value.to_le_bytes());
    Ok(buf)
}

fn parse_header<'a>(magic: &[u8; 4], bytes: &'a [u8], elem: usize) -> Result<([usize; 3], f32, &'a [u8]), VoxError> {
    if bytes.len() < 4 || &bytes[..4] != magic {
        return Err(VoxError::BadMagic);
    }
    if bytes.len() < HEADER_LEN {
        return Err(VoxError::Truncated {
            expected: HEADER_LEN,
            found: bytes.len(),
        });
    }
    let word = |o: usize| [bytes[o], bytes[o + 1], bytes[o + 2], bytes[o + 3]];
    let dims = [0, 1, 2].map(|d| u32::from_le_bytes(word(4 + 4 * d)) as usize);
    let value = f32::from_le_bytes(word(16));
    let payload = &bytes[HEADER_LEN..];
    let expected = dims
        .iter()
        .try_fold(elem, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| VoxError::Invalid(format!("dims {dims:?} overflow")))?;
    if payload.len() != expected {
        return Err(VoxError::Truncated {
            expected,
            found: payload.len(),
        });
    }
    Ok((dims, value, payload))
}

pub fn volume_to_bytes(v: &Volume3D) -> Result<Vec<u8>, VoxError> {
    let mut buf = header(VOLUME_MAGIC, v.dims(), v.voxel_size_um())?;
    buf.extend_from_slice(v.data());
    Ok(buf)
}

pub fn volume_from_bytes(bytes: &[u8]) -> Result<Volume3D, VoxError> {
    let (dims, voxel_size, payload) = parse_header(VOLUME_MAGIC, bytes, 1)?;
    Volume3D::new(dims, voxel_size, payload.to_vec())
}

pub fn save_volume(v: &Volume3D, path: impl AsRef<Path>) -> Result<(), VoxError> {
    std::fs::write(path, volume_to_bytes(v)?)?;
    Ok(())
}

pub fn load_volume(path: impl AsRef<Path>) -> Result<Volume3D, VoxError> {
    volume_from_bytes(&std::fs::read(path)?)
}

pub fn grid_to_bytes(pg: &PorosityGrid) -> Result<Vec<u8>, VoxError> {
    let mut buf = header(GRID_MAGIC, pg.grid_dims(), pg.block_size() as f32)?;
    for v in pg.values() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    Ok(buf)
}

pub fn grid_from_bytes(bytes: &[u8]) -> Result<PorosityGrid, VoxError> {
    let (dims, block, payload) = parse_header(GRID_MAGIC, bytes, 4)?;
    if !(block >= 1.0 && block.fract() == 0.0) {
        return Err(VoxError::Invalid(format!("block size {block} is not a positive integer")));
    }
    let values = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    PorosityGrid::new(dims, block as usize, values)
}

pub fn save_porosity_grid(pg: &PorosityGrid, path: impl AsRef<Path>) -> Result<(), VoxError> {
    std::fs::write(path, grid_to_bytes(pg)?)?;
    Ok(())
}

pub fn load_porosity_grid(path: impl AsRef<Path>) -> Result<PorosityGrid, VoxError> {
    grid_from_bytes(&std::fs::read(path)?)
}
