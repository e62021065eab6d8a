//! Binary checkpoint format.
//!
//! All integers and reals are little-endian:
//!
//! ```text
//! "EYNT"  u32 version (=1)  u32 entry_count
//! per entry:
//!   u16 name_len  name (UTF-8)  u8 rank  u32 dims[rank]
//!   f32 value[..]  f32 m[..]  f32 v[..]
//! u64 step
//! u32 crc32 of every preceding byte
//! ```

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::network::{NetworkSpec, ParamEntry, ParamStore};
use crate::tensor::{Dims, Tensor4};

pub const MAGIC: &[u8; 4] = b"EYNT";
pub const VERSION: u32 = 1;

pub fn encode(store: &ParamStore<f32>) -> Result<Vec<u8>> {
    if store.is_empty() {
        return Err(Error::Checkpoint(
            "refusing to save an empty parameter store".into(),
        ));
    }
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for (name, e) in store.iter() {
        let bytes = name.as_bytes();
        let len = u16::try_from(bytes.len())
            .map_err(|_| Error::Checkpoint(format!("parameter name too long: {name:?}")))?;
        buf.extend_from_slice(&len.to_le_bytes());
        buf.extend_from_slice(bytes);
        buf.push(4);
        for d in e.value.dims().to_array() {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for t in [&e.value, &e.m, &e.v] {
            for v in t.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    buf.extend_from_slice(&store.step().to_le_bytes());
    let crc = crc32fast::hash(&buf);
    buf.extend_from_slice(&crc.to_le_bytes());
    Ok(buf)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Checkpoint(format!(
                "truncated file while reading {what}"
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn tensor(&mut self, dims: Dims, what: &str) -> Result<Tensor4<f32>> {
        let raw = self.take(dims.len() * 4, what)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Tensor4::from_vec(dims, data)
    }
}

pub fn decode(bytes: &[u8]) -> Result<ParamStore<f32>> {
    if bytes.len() < MAGIC.len() || &bytes[..4] != MAGIC {
        return Err(Error::Checkpoint(
            "bad magic, not an EYNT checkpoint".into(),
        ));
    }
    if bytes.len() < 4 + 4 + 4 + 8 + 4 {
        return Err(Error::Checkpoint("truncated file".into()));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().unwrap());
    let actual = crc32fast::hash(body);
    if stored != actual {
        return Err(Error::Checkpoint(format!(
            "checksum mismatch: file says {stored:08x}, contents hash to {actual:08x}"
        )));
    }
    let mut r = Reader { buf: body, pos: 4 };
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported version {version}, expected {VERSION}"
        )));
    }
    let count = r.u32("entry count")?;
    let mut store = ParamStore::new();
    for i in 0..count {
        let len = r.u16("name length")? as usize;
        let name = std::str::from_utf8(r.take(len, "entry name")?)
            .map_err(|_| Error::Checkpoint(format!("entry {i} has a non-UTF-8 name")))?
            .to_string();
        let rank = r.u8(&name)? as usize;
        if rank > 4 {
            return Err(Error::Checkpoint(format!(
                "entry {name:?} has rank {rank} > 4"
            )));
        }
        let mut dims = [1usize; 4];
        for slot in dims[4 - rank..].iter_mut() {
            *slot = r.u32(&name)? as usize;
        }
        let dims = Dims::from(dims);
        let value = r.tensor(dims, &name)?;
        let m = r.tensor(dims, &name)?;
        let v = r.tensor(dims, &name)?;
        let entry = ParamEntry {
            grad: Tensor4::zeros(dims),
            value,
            m,
            v,
        };
        store
            .insert_entry(name.clone(), entry)
            .map_err(|e| Error::Checkpoint(format!("entry {name:?}: {e}")))?;
    }
    store.set_step(r.u64("step counter")?);
    if r.pos != body.len() {
        return Err(Error::Checkpoint(format!(
            "{} unexpected trailing bytes",
            body.len() - r.pos
        )));
    }
    Ok(store)
}

pub fn save(store: &ParamStore<f32>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode(store)?).map_err(|e| Error::file(path, e))
}

pub fn load(path: impl AsRef<Path>) -> Result<ParamStore<f32>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::file(path, e))?;
    decode(&bytes)
}

/// Loads and checks the entries against the layout of `spec`.
pub fn load_for_spec(path: impl AsRef<Path>, spec: &NetworkSpec) -> Result<ParamStore<f32>> {
    let store = load(path)?;
    store.check_layout(spec)?;
    Ok(store)
}
