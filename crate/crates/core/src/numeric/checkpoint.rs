//! `MGN1` tensor container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic   4 bytes  "MGN1"
//! count   u32      number of tensors
//! repeated count times:
//!   name_len u32, name (UTF-8)
//!   ndim     u32, dims (u64 x ndim)
//!   data     f64 x prod(dims), row-major
//! ```

use std::io::{Read, Write};
use std::path::Path;

use super::{ParamStore, Scalar, Tensor};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"MGN1";

pub fn write_tensors<S: Scalar, W: Write>(mut w: W, tensors: &[(String, Tensor<S>)]) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&(tensors.len() as u32).to_le_bytes())?;
    for (name, t) in tensors {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(t.shape().len() as u32).to_le_bytes())?;
        for &d in t.shape() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for v in t.data() {
            w.write_all(&v.as_f64().to_le_bytes())?;
        }
    }
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

pub fn read_tensors<S: Scalar, R: Read>(mut r: R) -> Result<Vec<(String, Tensor<S>)>> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint(format!("bad magic {magic:?}")));
    }
    let count = read_u32(&mut r)?;
    let mut out = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let len = read_u32(&mut r)? as usize;
        let mut name = vec![0u8; len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let ndim = read_u32(&mut r)? as usize;
        let shape = (0..ndim)
            .map(|_| read_u64(&mut r).map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        let mut b = [0u8; 8];
        for _ in 0..n {
            r.read_exact(&mut b)?;
            data.push(S::lit(f64::from_le_bytes(b)));
        }
        out.push((name, Tensor::new(shape, data)?));
    }
    Ok(out)
}

pub fn save<S: Scalar>(path: &Path, store: &ParamStore<S>) -> Result<()> {
    let named: Vec<_> = store
        .iter()
        .map(|(n, t)| (n.to_string(), t.clone()))
        .collect();
    let file = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_tensors(file, &named)
}

pub fn load<S: Scalar>(path: &Path) -> Result<Vec<(String, Tensor<S>)>> {
    read_tensors(std::io::BufReader::new(std::fs::File::open(path)?))
}
