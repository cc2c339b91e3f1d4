//! The `D2WB` little-endian tensor container.
//!
//! ```text
//! "D2WB" | u32 version = 1 | u32 entry_count
//! per entry:
//!   u16 name_len | name (UTF-8) | u8 dtype (0 = f32) | u8 ndim | ndim × u32 dims
//!   payload (row-major f32) | u32 CRC32 of the payload bytes
//! ```
//!
//! One container holds either a weight bank (conv weights plus the
//! `__norm__` metadata entry) or a single tensor under the name `"data"`
//! (depth maps, feature-map dumps).

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::error::{D2Error, Result};
use crate::tensor::Tensor3;

pub const MAGIC: [u8; 4] = *b"D2WB";
pub const VERSION: u32 = 1;
const DTYPE_F32: u8 = 0;

/// Name of the single entry in plain tensor files.
pub const DATA_ENTRY: &str = "data";

#[derive(Debug, Clone, PartialEq)]
pub struct Entry {
    pub dims: Vec<usize>,
    pub data: Vec<f32>,
}

impl Entry {
    pub fn new(dims: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let n: usize = dims.iter().product();
        if n != data.len() {
            return Err(D2Error::ShapeMismatch(format!(
                "entry dims {dims:?} need {n} values, got {}",
                data.len()
            )));
        }
        Ok(Self { dims, data })
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Container {
    pub entries: BTreeMap<String, Entry>,
}

impl Container {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, entry: Entry) {
        self.entries.insert(name.into(), entry);
    }

    pub fn get(&self, name: &str) -> Option<&Entry> {
        self.entries.get(name)
    }

    /// Wraps a tensor as a single-entry container.
    pub fn from_tensor(t: &Tensor3) -> Self {
        let mut c = Self::new();
        c.insert(
            DATA_ENTRY,
            Entry {
                dims: vec![t.height(), t.width(), t.channels()],
                data: t.data().to_vec(),
            },
        );
        c
    }

    /// Reads the `"data"` entry back as a tensor. Two-dimensional entries
    /// (depth maps) come back with a single channel.
    pub fn tensor(&self, name: &str) -> Result<Tensor3> {
        let e = self
            .get(name)
            .ok_or_else(|| D2Error::Format(format!("container has no entry {name:?}")))?;
        match e.dims.as_slice() {
            &[h, w] => Tensor3::new(h, w, 1, e.data.clone()),
            &[h, w, c] => Tensor3::new(h, w, c, e.data.clone()),
            d => Err(D2Error::ShapeMismatch(format!(
                "entry {name:?} has dims {d:?}, expected 2 or 3 dimensions"
            ))),
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (name, entry) in &self.entries {
            let name_len = u16::try_from(name.len())
                .map_err(|_| D2Error::Format(format!("entry name too long: {name:?}")))?;
            let ndim = u8::try_from(entry.dims.len())
                .map_err(|_| D2Error::Format(format!("too many dims in {name:?}")))?;
            out.extend_from_slice(&name_len.to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(DTYPE_F32);
            out.push(ndim);
            for &d in &entry.dims {
                let d = u32::try_from(d)
                    .map_err(|_| D2Error::Format(format!("dimension {d} too large")))?;
                out.extend_from_slice(&d.to_le_bytes());
            }
            let start = out.len();
            for v in &entry.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
            let crc = crc32fast::hash(&out[start..]);
            out.extend_from_slice(&crc.to_le_bytes());
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let magic: [u8; 4] = r.take(4)?.try_into().unwrap();
        if magic != MAGIC {
            return Err(D2Error::BadMagic {
                expected: MAGIC,
                found: magic,
            });
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(D2Error::VersionUnsupported(version));
        }
        let count = r.u32()?;
        let mut entries = BTreeMap::new();
        for _ in 0..count {
            let name_len = r.u16()? as usize;
            let name = String::from_utf8(r.take(name_len)?.to_vec())
                .map_err(|_| D2Error::Format("entry name is not UTF-8".into()))?;
            let dtype = r.u8()?;
            if dtype != DTYPE_F32 {
                return Err(D2Error::Format(format!(
                    "entry {name:?}: unsupported dtype {dtype}"
                )));
            }
            let ndim = r.u8()? as usize;
            let mut dims = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                dims.push(r.u32()? as usize);
            }
            let n = dims
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .and_then(|n| n.checked_mul(4))
                .ok_or(D2Error::TruncatedFile)?;
            let payload = r.take(n)?;
            let crc = r.u32()?;
            if crc32fast::hash(payload) != crc {
                return Err(D2Error::ChecksumMismatch(name));
            }
            let data = payload
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
                .collect();
            entries.insert(name, Entry { dims, data });
        }
        Ok(Self { entries })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path.as_ref())?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path.as_ref(), self.to_bytes()?)?;
        Ok(())
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).ok_or(D2Error::TruncatedFile)?;
        let s = self.bytes.get(self.pos..end).ok_or(D2Error::TruncatedFile)?;
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}
