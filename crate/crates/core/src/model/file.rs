//! Weight file layout (little-endian):
//!
//! ```text
//! "Q3DK"  u32 version
//! u32 n  config text (n bytes of key=value lines)
//! u32 count
//! count × { u32 len, name bytes, u32 rank, rank × u64 extent, u8 dtype, u64 offset }
//! tensor payloads, each starting on a 64-byte boundary
//! ```
//!
//! dtype 0 is f64, 1 is f32. Files are always written as f64.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use super::config::ModelConfig;
use super::forward::Model;
use super::weights::ModelWeights;
use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const MAGIC: &[u8; 4] = b"Q3DK";
pub const FORMAT_VERSION: u32 = 1;
const ALIGN: u64 = 64;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DType {
    F64,
    F32,
}

impl DType {
    fn tag(self) -> u8 {
        match self {
            DType::F64 => 0,
            DType::F32 => 1,
        }
    }

    fn from_tag(tag: u8) -> Result<Self> {
        match tag {
            0 => Ok(DType::F64),
            1 => Ok(DType::F32),
            t => Err(Error::Format(format!("unknown dtype tag {t}"))),
        }
    }

    fn width(self) -> u64 {
        match self {
            DType::F64 => 8,
            DType::F32 => 4,
        }
    }
}

/// One tensor directory entry.
#[derive(Clone, Debug, PartialEq)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: DType,
    pub offset: u64,
}

/// Header of a weight file, readable without touching the payloads.
#[derive(Clone, Debug, PartialEq)]
pub struct FileSummary {
    pub version: u32,
    pub config: ModelConfig,
    pub entries: Vec<TensorEntry>,
}

fn align_up(x: u64) -> u64 {
    x.div_ceil(ALIGN) * ALIGN
}

pub fn to_bytes(model: &Model) -> Vec<u8> {
    let config = model.config().to_text();
    let weights: Vec<(&str, &Tensor)> = model.weights().iter().collect();

    let mut header_len = 4 + 4 + 4 + config.len() as u64 + 4;
    for (name, t) in &weights {
        header_len += 4 + name.len() as u64 + 4 + 8 * t.rank() as u64 + 1 + 8;
    }
    let mut offsets = Vec::with_capacity(weights.len());
    let mut cursor = align_up(header_len);
    for (_, t) in &weights {
        offsets.push(cursor);
        cursor = align_up(cursor + 8 * t.numel() as u64);
    }

    let mut out = Vec::with_capacity(cursor as usize);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(config.len() as u32).to_le_bytes());
    out.extend_from_slice(config.as_bytes());
    out.extend_from_slice(&(weights.len() as u32).to_le_bytes());
    for ((name, t), off) in weights.iter().zip(&offsets) {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &e in t.shape() {
            out.extend_from_slice(&(e as u64).to_le_bytes());
        }
        out.push(DType::F64.tag());
        out.extend_from_slice(&off.to_le_bytes());
    }
    debug_assert_eq!(out.len() as u64, header_len);
    for ((_, t), &off) in weights.iter().zip(&offsets) {
        out.resize(off as usize, 0);
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out.resize(cursor as usize, 0);
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Format(format!("truncated header at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn text(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Format("header text is not UTF-8".into()))
    }
}

pub fn read_summary(bytes: &[u8]) -> Result<FileSummary> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4).map_err(|_| Error::Format("file too short for magic".into()))? != MAGIC {
        return Err(Error::Format("bad magic: not a Q3DK weight file".into()));
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(Error::Format(format!("unsupported format version {version}")));
    }
    let config = ModelConfig::from_text(&r.text()?)?;
    let count = r.u32()? as usize;
    let mut entries = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let name = r.text()?;
        let rank = r.u32()? as usize;
        if rank > 8 {
            return Err(Error::Format(format!("tensor {name} claims rank {rank}")));
        }
        let shape = (0..rank).map(|_| r.u64().map(|e| e as usize)).collect::<Result<Vec<_>>>()?;
        let dtype = DType::from_tag(r.u8()?)?;
        let offset = r.u64()?;
        if offset % ALIGN != 0 {
            return Err(Error::Format(format!("tensor {name} payload offset {offset} is not 64-byte aligned")));
        }
        entries.push(TensorEntry { name, shape, dtype, offset });
    }
    Ok(FileSummary { version, config, entries })
}

pub fn from_bytes(bytes: &[u8]) -> Result<Model> {
    let summary = read_summary(bytes)?;
    let expected: BTreeMap<String, Vec<usize>> = summary.config.tensor_shapes().into_iter().collect();
    let mut tensors = BTreeMap::new();
    for e in &summary.entries {
        match expected.get(&e.name) {
            Some(s) if *s == e.shape => {}
            Some(s) => {
                return Err(Error::Format(format!("tensor {} is {:?}, config expects {:?}", e.name, e.shape, s)))
            }
            None => return Err(Error::Format(format!("unexpected tensor {}", e.name))),
        }
        let numel: usize = e.shape.iter().product();
        let len = numel as u64 * e.dtype.width();
        let end = e.offset.checked_add(len).filter(|&end| end <= bytes.len() as u64).ok_or_else(|| {
            Error::Format(format!("truncated payload for {}", e.name))
        })?;
        let raw = &bytes[e.offset as usize..end as usize];
        let data: Vec<f64> = match e.dtype {
            DType::F64 => raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect(),
            DType::F32 => raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
                .collect(),
        };
        if tensors.insert(e.name.clone(), Tensor::new(e.shape.clone(), data)?).is_some() {
            return Err(Error::Format(format!("tensor {} listed twice", e.name)));
        }
    }
    if tensors.len() != expected.len() {
        let missing: Vec<&String> = expected.keys().filter(|k| !tensors.contains_key(*k)).collect();
        return Err(Error::Format(format!("missing tensors {missing:?}")));
    }
    let weights = ModelWeights::new(&summary.config, tensors)?;
    Model::new(summary.config, weights)
}

pub fn save(path: impl AsRef<Path>, model: &Model) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(&to_bytes(model))?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<Model> {
    from_bytes(&std::fs::read(path)?)
}

pub fn inspect(path: impl AsRef<Path>) -> Result<FileSummary> {
    read_summary(&std::fs::read(path)?)
}
