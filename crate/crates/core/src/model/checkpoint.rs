//! Binary checkpoint: `KDOC` magic, u32 LE version, u32 LE config length,
//! config text, then tensor records until end of file. Each record is
//! u32 LE name length, name, u32 LE rank, u64 LE dims, f32 LE payload.

use std::path::Path;

use indexmap::IndexMap;

use super::{Architecture, Model};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"KDOC";
pub const FORMAT_VERSION: u32 = 1;

pub fn write_checkpoint(model: &Model) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    let config = model.arch().to_text();
    out.extend_from_slice(&(config.len() as u32).to_le_bytes());
    out.extend_from_slice(config.as_bytes());
    for (name, t) in model.params() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for d in t.shape() {
            out.extend_from_slice(&(*d as u64).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

/// Writes through a temporary sibling and renames, so readers never see a
/// partial file.
pub fn save_checkpoint(model: &Model, path: &Path) -> Result<()> {
    crate::io::write_atomic(path, &write_checkpoint(model))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|e| *e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::Format(format!("truncated file while reading {what} at byte {}", self.pos))),
        }
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    fn done(&self) -> bool {
        self.pos == self.bytes.len()
    }
}

/// A decoded checkpoint: architecture plus tensors in file order.
pub struct CheckpointData {
    pub arch: Architecture,
    pub tensors: Vec<(String, Vec<usize>, Vec<f32>)>,
}

pub fn read_checkpoint(bytes: &[u8]) -> Result<CheckpointData> {
    let mut r = Reader { bytes, pos: 0 };
    let magic = r.take(4, "magic")?;
    if magic != MAGIC {
        return Err(Error::Format(format!("bad magic {magic:?}, expected {MAGIC:?}")));
    }
    let version = r.u32("version")?;
    if version != FORMAT_VERSION {
        return Err(Error::Format(format!("unsupported version {version}, expected {FORMAT_VERSION}")));
    }
    let len = r.u32("config length")? as usize;
    let text = std::str::from_utf8(r.take(len, "config block")?)
        .map_err(|_| Error::Format("config block is not UTF-8".into()))?;
    let arch = Architecture::from_text(text)?;
    let mut tensors = Vec::new();
    while !r.done() {
        let name_len = r.u32("tensor name length")? as usize;
        let name = std::str::from_utf8(r.take(name_len, "tensor name")?)
            .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?
            .to_string();
        let rank = r.u32("tensor rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u64("tensor dims")? as usize);
        }
        let numel: usize = shape.iter().product();
        let payload = r.take(numel.checked_mul(4).ok_or_else(|| Error::Format("tensor too large".into()))?, &name)?;
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        tensors.push((name, shape, data));
    }
    Ok(CheckpointData { arch, tensors })
}

/// Copies every tensor of `bytes` into `model`, which must have the same
/// parameter names and shapes.
pub fn load_checkpoint_into(model: &mut Model, bytes: &[u8]) -> Result<()> {
    let data = read_checkpoint(bytes)?;
    let mut values = IndexMap::new();
    for (name, shape, v) in data.tensors {
        let Some(t) = model.params().get(&name) else {
            return Err(Error::UnknownTensor(name));
        };
        if t.shape() != shape.as_slice() {
            return Err(Error::ShapeMismatch {
                name,
                expected: t.shape().to_vec(),
                found: shape,
            });
        }
        values.insert(name, v);
    }
    model.load_values(&values)
}

/// Rebuilds a model from the config stored in the file, then loads weights.
pub fn load_checkpoint(path: &Path) -> Result<Model> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let arch = read_checkpoint(&bytes)?.arch;
    let mut model = Model::build(arch, 0)?;
    load_checkpoint_into(&mut model, &bytes)?;
    Ok(model)
}
