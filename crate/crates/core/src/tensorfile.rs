//! Binary tensor file format.
//!
//! Layout: magic bytes `MCT1`, u32 rank, `rank` u32 dims, then the
//! little-endian f32 payload in row-major order.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"MCT1";

pub fn write_tensor(path: &Path, dims: &[usize], data: &[f32]) -> Result<()> {
    let expected: usize = dims.iter().product();
    if expected != data.len() {
        return Err(Error::invalid(format!(
            "tensor payload length {} does not match dims {:?}",
            data.len(),
            dims
        )));
    }
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    f.write_all(MAGIC)?;
    f.write_all(&(dims.len() as u32).to_le_bytes())?;
    for d in dims {
        f.write_all(&(*d as u32).to_le_bytes())?;
    }
    for v in data {
        f.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_tensor(path: &Path) -> Result<(Vec<usize>, Vec<f32>)> {
    let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 4];
    f.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::format(format!("{}: bad tensor magic", path.display())));
    }
    let mut u32buf = [0u8; 4];
    f.read_exact(&mut u32buf)?;
    let rank = u32::from_le_bytes(u32buf) as usize;
    if rank > 8 {
        return Err(Error::format(format!("{}: implausible rank {rank}", path.display())));
    }
    let mut dims = Vec::with_capacity(rank);
    for _ in 0..rank {
        f.read_exact(&mut u32buf)?;
        dims.push(u32::from_le_bytes(u32buf) as usize);
    }
    let count: usize = dims.iter().product();
    let mut data = Vec::with_capacity(count);
    for _ in 0..count {
        f.read_exact(&mut u32buf)?;
        data.push(f32::from_le_bytes(u32buf));
    }
    let mut trailing = [0u8; 1];
    if f.read(&mut trailing)? != 0 {
        return Err(Error::format(format!("{}: trailing bytes", path.display())));
    }
    Ok((dims, data))
}

/// Writes a `[B, C, H, W]` latent (f64 internally, stored as f32).
pub fn write_latent(path: &Path, z: &crate::Latent) -> Result<()> {
    let dims: Vec<usize> = z.shape().to_vec();
    let data: Vec<f32> = z.iter().map(|v| *v as f32).collect();
    write_tensor(path, &dims, &data)
}

pub fn read_latent(path: &Path) -> Result<crate::Latent> {
    let (dims, data) = read_tensor(path)?;
    if dims.len() != 4 {
        return Err(Error::format(format!(
            "{}: expected rank-4 latent, got rank {}",
            path.display(),
            dims.len()
        )));
    }
    let arr = ndarray::Array4::from_shape_vec(
        (dims[0], dims[1], dims[2], dims[3]),
        data.into_iter().map(|v| v as f64).collect(),
    )
    .map_err(|e| Error::format(e.to_string()))?;
    Ok(arr)
}
