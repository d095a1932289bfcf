//! Raw tensor fixture format: magic "FTEN", u32 version, u32 ndims (always
//! 4), four u32 dims, then the row-major payload as little-endian f32.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Dims, Tensor};

pub const MAGIC: &[u8; 4] = b"FTEN";
pub const VERSION: u32 = 1;

pub fn write_tensor(path: &Path, tensor: &Tensor) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let mut emit = |bytes: &[u8]| w.write_all(bytes).map_err(|e| Error::io(path, e));
    emit(MAGIC)?;
    emit(&VERSION.to_le_bytes())?;
    emit(&4u32.to_le_bytes())?;
    for d in tensor.dims() {
        emit(&(d as u32).to_le_bytes())?;
    }
    for v in tensor.data_ref().iter() {
        emit(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_tensor(path: &Path) -> Result<Tensor> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);

    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|e| Error::io(path, e))?;
    if &magic != MAGIC {
        return Err(Error::Data(format!("{}: not a FTEN file", path.display())));
    }
    let version = read_u32(&mut r, path)?;
    if version != VERSION {
        return Err(Error::Data(format!(
            "{}: unsupported FTEN version {version} (expected {VERSION})",
            path.display()
        )));
    }
    let ndims = read_u32(&mut r, path)?;
    if ndims != 4 {
        return Err(Error::Data(format!(
            "{}: FTEN ndims {ndims} (expected 4)",
            path.display()
        )));
    }
    let mut dims: Dims = [0; 4];
    for d in &mut dims {
        *d = read_u32(&mut r, path)? as usize;
    }
    let count: usize = dims.iter().product();
    let mut data = vec![0.0f32; count];
    let mut buf = [0u8; 4];
    for v in &mut data {
        r.read_exact(&mut buf).map_err(|e| Error::io(path, e))?;
        *v = f32::from_le_bytes(buf);
    }
    Tensor::from_vec(data, dims)
}

fn read_u32(r: &mut impl Read, path: &Path) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf).map_err(|e| Error::io(path, e))?;
    Ok(u32::from_le_bytes(buf))
}
