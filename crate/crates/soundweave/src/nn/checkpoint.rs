//! Self-describing binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic "SWCK" | version u32 | meta_len u64 | meta JSON | group_count u64
//! per group:
//!   name (u64 len + bytes) | param_count u64
//!   per param: name | rows u64 | cols u64 | data_len u64 | f32 LE values
//!   optimizer flag u8; if set:
//!     step u64 | lr f64 | beta1 | beta2 | eps | weight_decay | warmup u64
//!     per param: first-moment blob | second-moment blob (u64 len + f32 LE)
//! sha256 of everything above (32 bytes)
//! ```
//!
//! Values are stored as 32-bit floats, which is the training precision, so a
//! save/load round-trip is bit-exact.

use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use super::model::Parameters;
use super::optim::{AdamW, AdamWConfig};
use super::tensor::Tensor;
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"SWCK";
const VERSION: u32 = 1;

/// One named model inside a checkpoint: its parameters and, optionally, its
/// optimizer state.
pub struct CheckpointGroup {
    pub name: String,
    pub params: Parameters<f32>,
    pub optimizer: Option<AdamW<f32>>,
}

/// A checkpoint is a JSON meta document plus one or more parameter groups.
pub struct Checkpoint {
    pub meta: serde_json::Value,
    pub groups: Vec<CheckpointGroup>,
}

impl Checkpoint {
    pub fn group(&self, name: &str) -> Option<&CheckpointGroup> {
        self.groups.iter().find(|g| g.name == name)
    }
}

pub fn save_checkpoint(path: &Path, checkpoint: &Checkpoint) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    let meta = serde_json::to_vec(&checkpoint.meta)
        .map_err(|e| Error::Integrity(format!("meta serialization failed: {e}")))?;
    write_bytes(&mut buf, &meta);
    buf.extend_from_slice(&(checkpoint.groups.len() as u64).to_le_bytes());
    for group in &checkpoint.groups {
        write_bytes(&mut buf, group.name.as_bytes());
        buf.extend_from_slice(&(group.params.len() as u64).to_le_bytes());
        for (name, tensor) in group.params.iter() {
            write_bytes(&mut buf, name.as_bytes());
            buf.extend_from_slice(&(tensor.rows() as u64).to_le_bytes());
            buf.extend_from_slice(&(tensor.cols() as u64).to_le_bytes());
            write_f32s(&mut buf, tensor.data());
        }
        match &group.optimizer {
            None => buf.push(0),
            Some(opt) => {
                buf.push(1);
                buf.extend_from_slice(&opt.step_count().to_le_bytes());
                let c = opt.config;
                for v in [c.learning_rate, c.beta1, c.beta2, c.eps, c.weight_decay] {
                    buf.extend_from_slice(&v.to_le_bytes());
                }
                buf.extend_from_slice(&c.warmup_steps.to_le_bytes());
                let (m, v) = opt.moments();
                for (mt, vt) in m.iter().zip(v) {
                    write_f32s(&mut buf, mt.data());
                    write_f32s(&mut buf, vt.data());
                }
            }
        }
    }
    let digest = Sha256::digest(&buf);
    buf.extend_from_slice(&digest);
    fs::write(path, buf)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path)?;
    if bytes.len() < MAGIC.len() + 4 + 32 {
        return Err(Error::Integrity("checkpoint file is too short".into()));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 32);
    let digest = Sha256::digest(body);
    if digest.as_slice() != tail {
        return Err(Error::Integrity(
            "checkpoint checksum mismatch (truncated or corrupt file)".into(),
        ));
    }
    let mut cur = Cursor::new(body);
    let magic = cur.take(4)?;
    if magic != MAGIC {
        return Err(Error::Integrity("not a checkpoint file".into()));
    }
    let version = u32::from_le_bytes(cur.take(4)?.try_into().unwrap());
    if version != VERSION {
        return Err(Error::Integrity(format!(
            "unsupported checkpoint format version {version}"
        )));
    }
    let meta_bytes = cur.take_prefixed()?;
    let meta = serde_json::from_slice(meta_bytes)
        .map_err(|e| Error::Integrity(format!("meta parse failed: {e}")))?;
    let group_count = cur.take_u64()?;
    let mut groups = Vec::with_capacity(group_count as usize);
    for _ in 0..group_count {
        let name = String::from_utf8(cur.take_prefixed()?.to_vec())
            .map_err(|_| Error::Integrity("group name is not UTF-8".into()))?;
        let param_count = cur.take_u64()?;
        let mut params = Parameters::new();
        let mut shapes = Vec::new();
        for _ in 0..param_count {
            let pname = String::from_utf8(cur.take_prefixed()?.to_vec())
                .map_err(|_| Error::Integrity("parameter name is not UTF-8".into()))?;
            let rows = cur.take_u64()? as usize;
            let cols = cur.take_u64()? as usize;
            let data = cur.take_f32s()?;
            if data.len() != rows * cols {
                return Err(Error::Integrity(format!(
                    "parameter {pname} has {} values for shape {rows}x{cols}",
                    data.len()
                )));
            }
            shapes.push((rows, cols));
            params.push(&pname, Tensor::from_vec(rows, cols, data));
        }
        let optimizer = if cur.take_u8()? == 1 {
            let step = cur.take_u64()?;
            let learning_rate = cur.take_f64()?;
            let beta1 = cur.take_f64()?;
            let beta2 = cur.take_f64()?;
            let eps = cur.take_f64()?;
            let weight_decay = cur.take_f64()?;
            let warmup_steps = cur.take_u64()?;
            let config = AdamWConfig {
                learning_rate,
                beta1,
                beta2,
                eps,
                weight_decay,
                warmup_steps,
            };
            let mut m = Vec::with_capacity(shapes.len());
            let mut v = Vec::with_capacity(shapes.len());
            for &(rows, cols) in &shapes {
                let md = cur.take_f32s()?;
                let vd = cur.take_f32s()?;
                if md.len() != rows * cols || vd.len() != rows * cols {
                    return Err(Error::Integrity(
                        "optimizer moment shape mismatch".into(),
                    ));
                }
                m.push(Tensor::from_vec(rows, cols, md));
                v.push(Tensor::from_vec(rows, cols, vd));
            }
            Some(AdamW::from_parts(config, step, m, v))
        } else {
            None
        };
        groups.push(CheckpointGroup {
            name,
            params,
            optimizer,
        });
    }
    if !cur.at_end() {
        return Err(Error::Integrity("trailing bytes after checkpoint body".into()));
    }
    Ok(Checkpoint { meta, groups })
}

fn write_bytes(buf: &mut Vec<u8>, bytes: &[u8]) {
    buf.extend_from_slice(&(bytes.len() as u64).to_le_bytes());
    buf.extend_from_slice(bytes);
}

fn write_f32s(buf: &mut Vec<u8>, values: &[f32]) {
    buf.extend_from_slice(&((values.len() * 4) as u64).to_le_bytes());
    for v in values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        Cursor { bytes, pos: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Integrity("checkpoint body ends early".into()));
        }
        let slice = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(slice)
    }

    fn take_u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn take_u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn take_f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn take_prefixed(&mut self) -> Result<&'a [u8]> {
        let len = self.take_u64()? as usize;
        self.take(len)
    }

    fn take_f32s(&mut self) -> Result<Vec<f32>> {
        let bytes = self.take_prefixed()?;
        if bytes.len() % 4 != 0 {
            return Err(Error::Integrity("float blob length not a multiple of 4".into()));
        }
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    fn at_end(&self) -> bool {
        self.pos == self.bytes.len()
    }
}
