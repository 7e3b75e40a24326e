//! `PTXC` checkpoints: named 32-bit float tensors.
//!
//! Layout, all integers little-endian: magic `PTXC`, version `u32`, tensor
//! count `u32`, then per tensor a `u16`-prefixed UTF-8 name, rank `u8`,
//! `rank` dims as `u32` and the values as `f32`.

use std::io::{Cursor, Read};
use std::path::Path;

use byteorder::{LittleEndian as LE, ReadBytesExt, WriteBytesExt};

use super::write_atomic;
use crate::autograd::Tensor;
use crate::error::{Error, Result};
use crate::params::ParamStore;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"PTXC";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn encode_checkpoint(store: &ParamStore) -> Vec<u8> {
    let mut out = CHECKPOINT_MAGIC.to_vec();
    out.write_u32::<LE>(CHECKPOINT_VERSION).unwrap();
    out.write_u32::<LE>(store.len() as u32).unwrap();
    for (name, t) in store.iter() {
        out.write_u16::<LE>(name.len() as u16).unwrap();
        out.extend_from_slice(name.as_bytes());
        out.write_u8(t.shape().len() as u8).unwrap();
        for &d in t.shape() {
            out.write_u32::<LE>(d as u32).unwrap();
        }
        for &v in t.data() {
            out.write_f32::<LE>(v as f32).unwrap();
        }
    }
    out
}

pub fn decode_checkpoint(bytes: &[u8]) -> std::result::Result<Vec<(String, Tensor)>, String> {
    let mut r = Cursor::new(bytes);
    let trunc = |_| "truncated checkpoint".to_string();
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(trunc)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err("not a checkpoint (bad magic)".into());
    }
    let version = r.read_u32::<LE>().map_err(trunc)?;
    if version != CHECKPOINT_VERSION {
        return Err(format!(
            "unsupported checkpoint version {version}, this build reads version {CHECKPOINT_VERSION}"
        ));
    }
    let count = r.read_u32::<LE>().map_err(trunc)?;
    let mut out = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let len = r.read_u16::<LE>().map_err(trunc)?;
        let mut name = vec![0u8; len as usize];
        r.read_exact(&mut name).map_err(trunc)?;
        let name = String::from_utf8(name).map_err(|_| "tensor name is not UTF-8".to_string())?;
        let rank = r.read_u8().map_err(trunc)?;
        let shape = (0..rank)
            .map(|_| r.read_u32::<LE>().map(|d| d as usize))
            .collect::<std::io::Result<Vec<_>>>()
            .map_err(trunc)?;
        let n: usize = shape.iter().product();
        let remaining = bytes.len() - r.position() as usize;
        if remaining < 4 * n {
            return Err(format!("truncated data for tensor {name:?}"));
        }
        let data = (0..n)
            .map(|_| r.read_f32::<LE>().map(f64::from))
            .collect::<std::io::Result<Vec<_>>>()
            .map_err(trunc)?;
        let t = Tensor::new(&shape, data).map_err(|e| format!("tensor {name:?}: {e}"))?;
        out.push((name, t));
    }
    if (r.position() as usize) != bytes.len() {
        return Err("trailing bytes after last tensor".into());
    }
    Ok(out)
}

pub fn save_checkpoint(path: &Path, store: &ParamStore) -> Result<()> {
    write_atomic(path, &encode_checkpoint(store))
}

pub fn load_checkpoint(path: &Path) -> Result<Vec<(String, Tensor)>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes).map_err(|m| Error::format(path, m))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store() -> ParamStore {
        let mut s = ParamStore::new();
        s.insert("a.weight", Tensor::new(&[2, 3], vec![0.5, -1.25, 3.0, 1e-7, 0.0, 7.0]).unwrap());
        s.insert("b", Tensor::scalar(2.0));
        s
    }

    #[test]
    fn round_trip_is_bitwise() {
        let s = store();
        let bytes = encode_checkpoint(&s);
        let back = decode_checkpoint(&bytes).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back[0].0, "a.weight");
        assert_eq!(back[0].1.shape(), &[2, 3]);
        assert_eq!(back[1].1.shape(), &[] as &[usize]);
        let mut s2 = store();
        s2.load_values(back).unwrap();
        assert_eq!(encode_checkpoint(&s2), bytes);
    }

    #[test]
    fn version_mismatch_refused() {
        let mut bytes = encode_checkpoint(&store());
        bytes[4] = 9;
        let err = decode_checkpoint(&bytes).unwrap_err();
        assert!(err.contains("version 9"), "{err}");
    }

    #[test]
    fn truncation_and_magic() {
        let bytes = encode_checkpoint(&store());
        assert!(decode_checkpoint(&bytes[..bytes.len() - 1]).is_err());
        assert!(decode_checkpoint(b"XXXX").is_err());
    }
}
