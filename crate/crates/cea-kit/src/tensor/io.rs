//! Flat binary tensor serialization.
//!
//! Single-tensor format: magic "CEAT", version u32, rank u32, dims as u64
//! list, then little-endian f64 payload. Containers prepend a name-length /
//! name-bytes pair before each tensor blob.

use std::io::{Read, Write};
use std::path::Path;

use super::Tensor;
use crate::error::{CeaError, Result};

const MAGIC: &[u8; 4] = b"CEAT";
const VERSION: u32 = 1;

pub fn write_tensor_to(w: &mut impl Write, t: &Tensor) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(t.shape().len() as u32).to_le_bytes())?;
    for &d in t.shape() {
        w.write_all(&(d as u64).to_le_bytes())?;
    }
    t.with_data(|data| {
        for v in data {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    })
}

pub fn read_tensor_from(r: &mut impl Read) -> Result<Tensor> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(CeaError::Other("bad tensor magic (expected CEAT)".into()));
    }
    let mut b4 = [0u8; 4];
    r.read_exact(&mut b4)?;
    let version = u32::from_le_bytes(b4);
    if version != VERSION {
        return Err(CeaError::Other(format!("unsupported tensor version {version}")));
    }
    r.read_exact(&mut b4)?;
    let rank = u32::from_le_bytes(b4) as usize;
    let mut shape = Vec::with_capacity(rank);
    let mut b8 = [0u8; 8];
    for _ in 0..rank {
        r.read_exact(&mut b8)?;
        shape.push(u64::from_le_bytes(b8) as usize);
    }
    let n: usize = shape.iter().product();
    let mut data = Vec::with_capacity(n);
    for _ in 0..n {
        r.read_exact(&mut b8)?;
        data.push(f64::from_le_bytes(b8));
    }
    Ok(Tensor::from_vec(&shape, data))
}

pub fn save_tensor(path: &Path, t: &Tensor) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_tensor_to(&mut f, t)
}

pub fn load_tensor(path: &Path) -> Result<Tensor> {
    let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
    read_tensor_from(&mut f)
}

/// Named-entry container: (name-length u32, name bytes, tensor blob)*.
pub fn save_container(path: &Path, entries: &[(String, Tensor)]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for (name, t) in entries {
        f.write_all(&(name.len() as u32).to_le_bytes())?;
        f.write_all(name.as_bytes())?;
        write_tensor_to(&mut f, t)?;
    }
    Ok(())
}

pub fn load_container(path: &Path) -> Result<Vec<(String, Tensor)>> {
    let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    loop {
        let mut b4 = [0u8; 4];
        match f.read_exact(&mut b4) {
            Ok(()) => {}
            Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => break,
            Err(e) => return Err(e.into()),
        }
        let len = u32::from_le_bytes(b4) as usize;
        let mut name = vec![0u8; len];
        f.read_exact(&mut name)?;
        let name = String::from_utf8(name)
            .map_err(|_| CeaError::Other("container entry name is not UTF-8".into()))?;
        out.push((name, read_tensor_from(&mut f)?));
    }
    Ok(out)
}
