//! Named-tensor checkpoint archive.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic        4 bytes  "SVTC"
//! version      u32      (= 1)
//! stage        u32 len + UTF-8
//! epoch        u64
//! seed         u64
//! config       u32 len + UTF-8 (JSON snapshot, stored verbatim)
//! entry count  u32
//! entries      name (u32 len + UTF-8) | dtype u8 (0 = f32, 1 = f64) | rank u32
//!              | rank × u32 dims | raw element bytes
//! ```

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::{DType, Element, Tensor};

pub const MAGIC: &[u8; 4] = b"SVTC";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub enum EntryData {
    F32(Vec<f32>),
    F64(Vec<f64>),
}

impl EntryData {
    fn dtype(&self) -> DType {
        match self {
            EntryData::F32(_) => DType::F32,
            EntryData::F64(_) => DType::F64,
        }
    }

    fn len(&self) -> usize {
        match self {
            EntryData::F32(v) => v.len(),
            EntryData::F64(v) => v.len(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Entry {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: EntryData,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub stage: String,
    pub epoch: u64,
    pub seed: u64,
    pub config: String,
    pub entries: Vec<Entry>,
}

impl Checkpoint {
    pub fn new(stage: &str, epoch: u64, seed: u64, config: String) -> Self {
        Checkpoint {
            stage: stage.to_string(),
            epoch,
            seed,
            config,
            entries: Vec::new(),
        }
    }

    pub fn push<T: Element>(&mut self, name: &str, tensor: &Tensor<T>) -> Result<()> {
        if self.entries.iter().any(|e| e.name == name) {
            return Err(Error::Checkpoint(format!("duplicate entry `{name}`")));
        }
        let data = match T::DTYPE {
            DType::F32 => EntryData::F32(tensor.data().iter().map(|v| v.to_f64_lossy() as f32).collect()),
            DType::F64 => EntryData::F64(tensor.to_f64_vec()),
        };
        self.entries.push(Entry {
            name: name.to_string(),
            dims: tensor.shape().to_vec(),
            data,
        });
        Ok(())
    }

    pub fn push_params<T: Element>(&mut self, prefix: &str, params: &ParamStore<T>) -> Result<()> {
        for (name, t) in params.iter() {
            self.push(&format!("{prefix}{name}"), t)?;
        }
        Ok(())
    }

    pub fn entry(&self, name: &str) -> Option<&Entry> {
        self.entries.iter().find(|e| e.name == name)
    }

    pub fn tensor<T: Element>(&self, name: &str) -> Result<Tensor<T>> {
        let e = self
            .entry(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing entry `{name}`")))?;
        let values: Vec<T> = match &e.data {
            EntryData::F32(v) => v.iter().map(|&x| T::from_f64_lossy(x as f64)).collect(),
            EntryData::F64(v) => v.iter().map(|&x| T::from_f64_lossy(x)).collect(),
        };
        Tensor::new(e.dims.clone(), values)
    }

    /// All entries under `prefix`, prefix stripped, in file order.
    pub fn params<T: Element>(&self, prefix: &str) -> Result<ParamStore<T>> {
        let mut out = ParamStore::new();
        for e in &self.entries {
            if let Some(rest) = e.name.strip_prefix(prefix) {
                out.insert(rest, self.tensor(&e.name)?)?;
            }
        }
        Ok(out)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut seen = HashSet::new();
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        put_str(&mut out, &self.stage);
        out.extend_from_slice(&self.epoch.to_le_bytes());
        out.extend_from_slice(&self.seed.to_le_bytes());
        put_str(&mut out, &self.config);
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for e in &self.entries {
            if !seen.insert(e.name.as_str()) {
                return Err(Error::Checkpoint(format!("duplicate entry `{}`", e.name)));
            }
            if e.dims.iter().product::<usize>() != e.data.len() {
                return Err(Error::Checkpoint(format!("entry `{}` dims disagree with data", e.name)));
            }
            put_str(&mut out, &e.name);
            out.push(e.data.dtype().tag());
            out.extend_from_slice(&(e.dims.len() as u32).to_le_bytes());
            for &d in &e.dims {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            match &e.data {
                EntryData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                EntryData::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported format version {version} (expected {VERSION})"
            )));
        }
        let stage = r.string()?;
        let epoch = r.u64()?;
        let seed = r.u64()?;
        let config = r.string()?;
        let count = r.u32()? as usize;
        let mut entries = Vec::with_capacity(count.min(1 << 16));
        let mut seen = HashSet::new();
        for _ in 0..count {
            let name = r.string()?;
            if !seen.insert(name.clone()) {
                return Err(Error::Checkpoint(format!("duplicate entry `{name}`")));
            }
            let tag = r.take(1)?[0];
            let dtype = DType::from_tag(tag)
                .ok_or_else(|| Error::Checkpoint(format!("entry `{name}`: unknown dtype tag {tag}")))?;
            let rank = r.u32()? as usize;
            let dims = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n: usize = dims.iter().product();
            let raw = r
                .take(n * dtype.size())
                .map_err(|_| Error::Checkpoint(format!("entry `{name}` is truncated")))?;
            let data = match dtype {
                DType::F32 => EntryData::F32(raw.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes"))).collect()),
                DType::F64 => EntryData::F64(raw.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes"))).collect()),
            };
            entries.push(Entry { name, dims, data });
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Checkpoint {
            stage,
            epoch,
            seed,
            config,
            entries,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Checkpoint("invalid UTF-8".into()))
    }
}
