//! Binary checkpoint format for [`ParameterSet`].
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic    b"SFLCKPT\0"
//! version  u32 (= 1)
//! count    u32
//! header   count × { name_len u32, name utf-8, kind u8, is_bn u8, ndim u32, dims ndim × u64 }
//! values   row-major f64 bit patterns, entries in header order
//! ```
//!
//! Values are stored as raw IEEE-754 bits so a round trip is bit-exact.

use std::io::{Read, Write};
use std::path::Path;

use super::params::{EntryKind, ParamEntry, ParameterSet};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"SFLCKPT\0";
pub const VERSION: u32 = 1;

pub fn encode(params: &ParameterSet) -> Vec<u8> {
    let mut out = Vec::with_capacity(64 + params.num_values() * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(params.entries.len() as u32).to_le_bytes());
    for e in &params.entries {
        out.extend_from_slice(&(e.name.len() as u32).to_le_bytes());
        out.extend_from_slice(e.name.as_bytes());
        out.push(e.kind.code());
        out.push(u8::from(e.is_bn()));
        out.extend_from_slice(&(e.shape.len() as u32).to_le_bytes());
        for &d in &e.shape {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
    }
    for v in params.entries.iter().flat_map(|e| &e.data) {
        out.extend_from_slice(&v.to_bits().to_le_bytes());
    }
    out
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or("unexpected end of data")?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> std::result::Result<u8, String> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> std::result::Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> std::result::Result<u64, String> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn decode(buf: &[u8]) -> std::result::Result<ParameterSet, String> {
    let mut c = Cursor { buf, pos: 0 };
    if c.take(8)? != MAGIC {
        return Err("not a checkpoint (bad magic)".into());
    }
    let version = c.u32()?;
    if version != VERSION {
        return Err(format!("unsupported checkpoint version {version}"));
    }
    let count = c.u32()? as usize;
    let mut headers = Vec::with_capacity(count.min(1024));
    for _ in 0..count {
        let len = c.u32()? as usize;
        let name = std::str::from_utf8(c.take(len)?).map_err(|e| e.to_string())?.to_owned();
        let kind = EntryKind::from_code(c.u8()?).ok_or_else(|| format!("unknown entry kind for `{name}`"))?;
        let is_bn = c.u8()? != 0;
        if is_bn != kind.is_bn() {
            return Err(format!("batch-norm flag inconsistent with kind for `{name}`"));
        }
        let ndim = c.u32()? as usize;
        let shape = (0..ndim).map(|_| c.u64().map(|d| d as usize)).collect::<std::result::Result<Vec<_>, _>>()?;
        headers.push((name, kind, shape));
    }
    let mut entries = Vec::with_capacity(headers.len());
    for (name, kind, shape) in headers {
        let n: usize = shape.iter().product();
        let raw = c.take(n.checked_mul(8).ok_or("shape overflow")?)?;
        let data = raw.chunks_exact(8).map(|b| f64::from_bits(u64::from_le_bytes(b.try_into().unwrap()))).collect();
        entries.push(ParamEntry { name, kind, shape, data });
    }
    if c.pos != buf.len() {
        return Err(format!("{} trailing bytes", buf.len() - c.pos));
    }
    Ok(ParameterSet::new(entries))
}

pub fn write_checkpoint(path: &Path, params: &ParameterSet) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(&encode(params))?;
    Ok(())
}

pub fn read_checkpoint(path: &Path) -> Result<ParameterSet> {
    let mut buf = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut buf)?;
    decode(&buf).map_err(|message| Error::Checkpoint { path: path.to_owned(), message })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nncore::{init_model, ModelSpec};
    use proptest::prelude::*;

    #[test]
    fn rejects_garbage() {
        assert!(decode(b"nope").is_err());
        let mut bytes = encode(&init_model(&ModelSpec::new(2, &[(3, true)]), 0).unwrap());
        bytes.pop();
        assert!(decode(&bytes).is_err());
        bytes[8] = 9;
        assert!(decode(&bytes).unwrap_err().contains("version"));
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sub/model.ckpt");
        let p = init_model(&ModelSpec::new(4, &[(6, true), (3, false)]), 8).unwrap();
        write_checkpoint(&path, &p).unwrap();
        assert_eq!(read_checkpoint(&path).unwrap(), p);
    }

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(values in proptest::collection::vec(any::<f64>(), 12), seed in 0u64..1000) {
            let mut p = init_model(&ModelSpec::new(2, &[(2, true)]), seed).unwrap();
            // overwrite with arbitrary bit patterns, NaN payloads included
            for (dst, v) in p.entries.iter_mut().flat_map(|e| e.data.iter_mut()).zip(values) {
                *dst = v;
            }
            let back = decode(&encode(&p)).unwrap();
            let bits = |q: &ParameterSet| q.entries.iter().flat_map(|e| e.data.iter().map(|v| v.to_bits())).collect::<Vec<_>>();
            prop_assert_eq!(bits(&back), bits(&p));
            prop_assert!(back.same_structure(&p));
        }
    }
}
