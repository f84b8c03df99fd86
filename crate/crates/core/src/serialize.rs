//! Little-endian named-tensor files shared by checkpoints and the output cache.
//!
//! Layout: magic, u32 entry count, then per entry a u32-length UTF-8 name,
//! a dtype byte (0 = f32, 1 = f64), u32 rank, u64 dims and the raw data.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use distill_tensor::{DType, Storage, Tensor};

use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"DSTLTNS1";

pub fn encode(entries: &[(String, Tensor)]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for (name, t) in entries {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(match t.dtype() {
            DType::F32 => 0,
            DType::F64 => 1,
        });
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        match t.storage() {
            Storage::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            Storage::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        }
    }
    out
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or("truncated data")?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u32(&mut self) -> std::result::Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
    fn u64(&mut self) -> std::result::Result<u64, String> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub fn decode(buf: &[u8]) -> std::result::Result<Vec<(String, Tensor)>, String> {
    let mut c = Cursor { buf, pos: 0 };
    if c.take(8)? != MAGIC {
        return Err("bad magic".into());
    }
    let n = c.u32()? as usize;
    let mut out = Vec::with_capacity(n.min(1 << 16));
    for _ in 0..n {
        let len = c.u32()? as usize;
        let name = String::from_utf8(c.take(len)?.to_vec()).map_err(|_| "name is not UTF-8")?;
        let dtype = match c.take(1)?[0] {
            0 => DType::F32,
            1 => DType::F64,
            b => return Err(format!("unknown dtype code {b}")),
        };
        let rank = c.u32()? as usize;
        let mut shape = Vec::with_capacity(rank.min(16));
        for _ in 0..rank {
            shape.push(c.u64()? as usize);
        }
        let count = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or("shape overflows")?;
        let bytes = c.take(count.checked_mul(dtype.size_in_bytes()).ok_or("shape overflows")?)?;
        let storage = match dtype {
            DType::F32 => {
                Storage::F32(bytes.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap())).collect())
            }
            DType::F64 => {
                Storage::F64(bytes.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().unwrap())).collect())
            }
        };
        out.push((name, Tensor::from_storage(storage, shape).map_err(|e| e.to_string())?));
    }
    if c.pos != buf.len() {
        return Err("trailing bytes".into());
    }
    Ok(out)
}

/// Write atomically: a temp file in the same directory, then rename.
pub fn save(path: &Path, entries: &[(String, Tensor)]) -> Result<()> {
    write_atomic(path, &encode(entries))
}

pub fn load(path: &Path) -> Result<Vec<(String, Tensor)>> {
    let mut buf = Vec::new();
    fs::File::open(path).and_then(|mut f| f.read_to_end(&mut buf)).map_err(|e| Error::storage(path, e))?;
    decode(&buf).map_err(|message| Error::Format { path: path.to_path_buf(), message })
}

pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::storage(dir, e))?;
    }
    let tmp = path.with_extension(format!("tmp{}", std::process::id()));
    let res = fs::File::create(&tmp)
        .and_then(|mut f| f.write_all(bytes).and_then(|_| f.sync_all()))
        .and_then(|_| fs::rename(&tmp, path));
    if let Err(e) = res {
        let _ = fs::remove_file(&tmp);
        return Err(Error::Storage { path: path.to_path_buf(), source: e });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bit_exact() {
        let a = Tensor::from_vec(vec![1.5, -0.0, f32::MIN_POSITIVE, 3.25e-7], vec![2, 2]).unwrap();
        let b = Tensor::from_vec_f64(vec![std::f64::consts::PI], vec![1]).unwrap();
        let bytes = encode(&[("a".into(), a.clone()), ("b.c".into(), b.clone())]);
        let back = decode(&bytes).unwrap();
        assert_eq!(back[0].0, "a");
        assert!(back[0].1.bit_eq(&a) && back[1].1.bit_eq(&b));
    }

    #[test]
    fn rejects_truncation() {
        let a = Tensor::from_vec(vec![1.0; 4], vec![4]).unwrap();
        let bytes = encode(&[("a".into(), a)]);
        assert!(decode(&bytes[..bytes.len() - 1]).is_err());
        assert!(decode(b"nonsense").is_err());
    }
}
