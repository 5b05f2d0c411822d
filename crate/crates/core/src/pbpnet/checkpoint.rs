//! `PBPCKPT1` parameter files.
//!
//! Layout: the 8 magic bytes, then one record per parameter in registration
//! order until end of file. Each record is `name_len: u32`, the UTF-8 name,
//! `rank: u32`, `rank` dims as `u64`, `dtype: u32` (0 = f32, 1 = f64), and
//! the raw values. All integers and values are little-endian.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::netcore::{ParamStore, Tensor};
use crate::real::Real;

pub const MAGIC: &[u8; 8] = b"PBPCKPT1";

pub fn encode<T: Real>(params: &ParamStore<T>) -> Vec<u8> {
    let mut out = MAGIC.to_vec();
    for (name, t) in params.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        out.extend_from_slice(&T::DTYPE_CODE.to_le_bytes());
        for &v in t.data() {
            v.write_le(&mut out);
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    record: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::Format(format!("truncated record {} while reading {what}", self.record))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

pub fn decode<T: Real>(bytes: &[u8]) -> Result<ParamStore<T>> {
    if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
        return Err(Error::Format("bad magic, not a PBPCKPT1 file".into()));
    }
    let mut r = Reader {
        bytes,
        pos: MAGIC.len(),
        record: 0,
    };
    let mut params = ParamStore::new();
    while r.pos < bytes.len() {
        let name_len = r.u32("name length")? as usize;
        let name = std::str::from_utf8(r.take(name_len, "name")?)
            .map_err(|_| Error::Format(format!("record {} name is not UTF-8", r.record)))?
            .to_string();
        let rank = r.u32("rank")? as usize;
        let dims = (0..rank)
            .map(|_| r.u64("dims").map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let dtype = r.u32("dtype")?;
        if dtype > 1 {
            return Err(Error::Format(format!("record '{name}' has unknown dtype {dtype}")));
        }
        if dtype != T::DTYPE_CODE {
            return Err(Error::Format(format!(
                "record '{name}' stores dtype {dtype}, expected {}",
                T::DTYPE_CODE
            )));
        }
        let count = dims
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| Error::Format(format!("record '{name}' dims overflow")))?;
        let raw = r.take(count.saturating_mul(T::BYTES), "data")?;
        let data = raw.chunks_exact(T::BYTES).map(T::read_le).collect();
        params.add(name, Tensor::new(dims, data)?);
        r.record += 1;
    }
    Ok(params)
}

pub fn save_checkpoint<T: Real>(params: &ParamStore<T>, path: &Path) -> Result<()> {
    fs::write(path, encode(params)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint<T: Real>(path: &Path) -> Result<ParamStore<T>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}
