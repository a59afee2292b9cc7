//! `DCLT` binary tensor files.
//!
//! Layout: magic `DCLT`, version `u8` (= 1), dtype `u8` (0 real64, 1 complex
//! pair), rank `u8`, `rank` little-endian `u64` dims, then the row-major
//! little-endian `f64` payload. Complex tensors record their logical dims;
//! the payload is the paired-plane storage and so holds twice as many values.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{complex_storage_shape, numel, DType, Tensor};
use crate::error::{Error, Result};

pub const DCLT_MAGIC: &[u8; 4] = b"DCLT";
pub const DCLT_VERSION: u8 = 1;

pub fn write_dclt_to<W: Write>(mut w: W, t: &Tensor) -> Result<()> {
    let dims = t.logical_shape();
    if dims.len() > u8::MAX as usize {
        return Err(Error::Format(format!("rank {} too large", dims.len())));
    }
    w.write_all(DCLT_MAGIC)?;
    w.write_all(&[DCLT_VERSION, t.dtype().code(), dims.len() as u8])?;
    for d in &dims {
        w.write_all(&(*d as u64).to_le_bytes())?;
    }
    for v in t.data() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_dclt_from<R: Read>(mut r: R) -> Result<Tensor> {
    let mut head = [0u8; 7];
    r.read_exact(&mut head)?;
    if &head[..4] != DCLT_MAGIC {
        return Err(Error::Format("missing DCLT magic".into()));
    }
    if head[4] != DCLT_VERSION {
        return Err(Error::Format(format!(
            "unsupported DCLT version {}",
            head[4]
        )));
    }
    let dtype = DType::from_code(head[5])?;
    let rank = head[6] as usize;
    let mut dims = Vec::with_capacity(rank);
    let mut buf = [0u8; 8];
    for _ in 0..rank {
        r.read_exact(&mut buf)?;
        let d = u64::from_le_bytes(buf);
        dims.push(usize::try_from(d).map_err(|_| Error::Format(format!("dim {d} too large")))?);
    }
    let storage = match dtype {
        DType::Real64 => dims,
        DType::Complex64Pair => {
            if dims.len() < 2 {
                return Err(Error::Format("complex tensor with rank < 2".into()));
            }
            complex_storage_shape(&dims)
        }
    };
    let n = numel(&storage);
    let mut bytes = vec![0u8; n * 8];
    r.read_exact(&mut bytes)?;
    let data = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect();
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing)? != 0 {
        return Err(Error::Format("trailing bytes after DCLT payload".into()));
    }
    Ok(Tensor::from_vec(&storage, data)?.with_dtype(dtype))
}

pub fn write_dclt(path: impl AsRef<Path>, t: &Tensor) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_dclt_to(&mut w, t)?;
    w.flush()?;
    Ok(())
}

pub fn read_dclt(path: impl AsRef<Path>) -> Result<Tensor> {
    read_dclt_from(BufReader::new(File::open(path)?))
}
