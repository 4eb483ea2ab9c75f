//! `PVOARR1` binary container and a JSON form for small fixtures.
//!
//! Layout: the 7-byte magic, `u32` rank, `rank` × `u32` extents, then the
//! payload as little-endian `f64`. Several records may follow each other in
//! one stream (checkpoints).

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const ARRAY_MAGIC: &[u8; 7] = b"PVOARR1";

pub fn write_array_to<T: Scalar, W: Write>(w: &mut W, a: &Tensor<T>) -> Result<()> {
    w.write_all(ARRAY_MAGIC)?;
    w.write_all(&(a.rank() as u32).to_le_bytes())?;
    for &e in a.shape() {
        w.write_all(&(e as u32).to_le_bytes())?;
    }
    for v in a.data() {
        w.write_all(&v.as_f64().to_le_bytes())?;
    }
    Ok(())
}

/// Reads one record; `Ok(None)` on a clean end of stream.
pub fn read_array_from<T: Scalar, R: Read>(r: &mut R) -> Result<Option<Tensor<T>>> {
    let mut magic = [0u8; 7];
    let mut got = 0;
    while got < magic.len() {
        let n = r.read(&mut magic[got..])?;
        if n == 0 {
            if got == 0 {
                return Ok(None);
            }
            return Err(Error::Format("truncated array header".into()));
        }
        got += n;
    }
    if &magic != ARRAY_MAGIC {
        return Err(Error::Format("bad array magic".into()));
    }
    let rank = read_u32(r)? as usize;
    if rank == 0 || rank > super::MAX_RANK {
        return Err(Error::Format(format!("unsupported array rank {rank}")));
    }
    let shape = (0..rank)
        .map(|_| read_u32(r).map(|v| v as usize))
        .collect::<Result<Vec<_>>>()?;
    let n: usize = shape.iter().product();
    let mut buf = vec![0u8; n * 8];
    r.read_exact(&mut buf)
        .map_err(|_| Error::Format("truncated array payload".into()))?;
    let data = buf
        .chunks_exact(8)
        .map(|c| T::lit(f64::from_le_bytes(c.try_into().unwrap())))
        .collect();
    Tensor::new(&shape, data).map(Some)
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)
        .map_err(|_| Error::Format("truncated array header".into()))?;
    Ok(u32::from_le_bytes(b))
}

pub fn write_array<T: Scalar>(path: impl AsRef<Path>, a: &Tensor<T>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_array_to(&mut w, a)?;
    w.flush()?;
    Ok(())
}

pub fn read_array<T: Scalar>(path: impl AsRef<Path>) -> Result<Tensor<T>> {
    let mut r = BufReader::new(File::open(path)?);
    read_array_from(&mut r)?.ok_or_else(|| Error::Format("empty array file".into()))
}

pub fn write_arrays<'a, T: Scalar + 'a>(
    path: impl AsRef<Path>,
    arrays: impl IntoIterator<Item = &'a Tensor<T>>,
) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for a in arrays {
        write_array_to(&mut w, a)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_arrays<T: Scalar>(path: impl AsRef<Path>) -> Result<Vec<Tensor<T>>> {
    let mut r = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    while let Some(a) = read_array_from(&mut r)? {
        out.push(a);
    }
    Ok(out)
}

/// JSON form: `{"shape": [...], "data": [...]}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArrayJson {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl<T: Scalar> From<&Tensor<T>> for ArrayJson {
    fn from(a: &Tensor<T>) -> Self {
        Self {
            shape: a.shape().to_vec(),
            data: a.to_f64_vec(),
        }
    }
}

impl ArrayJson {
    pub fn to_tensor<T: Scalar>(&self) -> Result<Tensor<T>> {
        Tensor::from_f64(&self.shape, &self.data)
    }
}
