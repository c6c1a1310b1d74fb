//! Flat binary parameter checkpoint.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic   8 bytes  "VOXDETCK"
//! version 1 byte   currently 1
//! count   u32      number of records
//! record:
//!   name_len u16, name bytes (utf-8)
//!   ndim     u8,  dims as u32 each
//!   values   numel x f64 (little-endian)
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::params::ParamStore;
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"VOXDETCK";
const VERSION: u8 = 1;

pub fn save(params: &ParamStore, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&[VERSION])?;
    w.write_all(&(params.len() as u32).to_le_bytes())?;
    for (name, tensor) in params.iter() {
        let name_bytes = name.as_bytes();
        w.write_all(&(name_bytes.len() as u16).to_le_bytes())?;
        w.write_all(name_bytes)?;
        w.write_all(&[tensor.shape().len() as u8])?;
        for &d in tensor.shape() {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        for &v in tensor.values() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load(path: &Path) -> Result<ParamStore> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Parse("not a checkpoint file (bad magic)".into()));
    }
    let mut version = [0u8; 1];
    r.read_exact(&mut version)?;
    if version[0] != VERSION {
        return Err(Error::Parse(format!("unsupported checkpoint version {}", version[0])));
    }
    let count = read_u32(&mut r)? as usize;
    let mut params = ParamStore::new();
    for _ in 0..count {
        let name_len = read_u16(&mut r)? as usize;
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name)
            .map_err(|_| Error::Parse("non-utf8 parameter name".into()))?;
        let mut ndim = [0u8; 1];
        r.read_exact(&mut ndim)?;
        let mut shape = Vec::with_capacity(ndim[0] as usize);
        for _ in 0..ndim[0] {
            shape.push(read_u32(&mut r)? as usize);
        }
        let numel: usize = shape.iter().product();
        let mut values = Vec::with_capacity(numel);
        let mut buf = [0u8; 8];
        for _ in 0..numel {
            r.read_exact(&mut buf)?;
            values.push(f64::from_le_bytes(buf));
        }
        params.insert(name, Tensor::new(shape, values)?);
    }
    Ok(params)
}

fn read_u16(r: &mut impl Read) -> Result<u16> {
    let mut buf = [0u8; 2];
    r.read_exact(&mut buf)?;
    Ok(u16::from_le_bytes(buf))
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_preserves_bits() {
        let mut params = ParamStore::new();
        params.insert("a.w", Tensor::new(vec![2, 3], vec![1.0, -2.5, 3.25, 0.0, 1e-300, 7.0]).unwrap());
        params.insert("b", Tensor::scalar(std::f64::consts::PI));
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.bin");
        save(&params, &path).unwrap();
        let loaded = load(&path).unwrap();
        assert_eq!(loaded.len(), 2);
        assert_eq!(loaded.get("a.w").unwrap(), params.get("a.w").unwrap());
        assert_eq!(loaded.get("b").unwrap(), params.get("b").unwrap());
    }

    #[test]
    fn rejects_bad_magic() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("junk.bin");
        std::fs::write(&path, b"NOTACKPT___").unwrap();
        assert!(load(&path).is_err());
    }
}
