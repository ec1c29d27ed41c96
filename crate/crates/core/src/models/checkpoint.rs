//! Binary checkpoint format for model state.
//!
//! Layout: magic `GKTM`, format version (u32 LE), record count (u32 LE),
//! then per-tensor records of `name_len: u16 | name: utf8 | rank: u8 |
//! dims: u32[rank] | data: f32[numel]`, all little endian. Records cover
//! every persistent tensor, including batch-norm running statistics.

use super::Model;
use crate::tensor::Tensor;
use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

const MAGIC: &[u8; 4] = b"GKTM";
const VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad magic: expected GKTM")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    BadVersion(u32),
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
    #[error("checkpoint does not match model: {0}")]
    Mismatch(String),
}

pub fn save_checkpoint(path: &Path, model: &mut dyn Model) -> Result<(), CheckpointError> {
    let mut records: Vec<(String, Tensor)> = Vec::new();
    model.visit_state("", &mut |name, t| records.push((name.to_string(), t.clone())));
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(records.len() as u32).to_le_bytes());
    for (name, t) in &records {
        let nb = name.as_bytes();
        buf.extend_from_slice(&(nb.len() as u16).to_le_bytes());
        buf.extend_from_slice(nb);
        buf.push(t.shape().len() as u8);
        for &d in t.shape() {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let tmp = path.with_extension("tmp");
    std::fs::File::create(&tmp)?.write_all(&buf)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path, model: &mut dyn Model) -> Result<(), CheckpointError> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let mut pos = 0usize;
    let take = |pos: &mut usize, n: usize| -> Result<&[u8], CheckpointError> {
        if *pos + n > bytes.len() {
            return Err(CheckpointError::Malformed("truncated file".into()));
        }
        let s = &bytes[*pos..*pos + n];
        *pos += n;
        Ok(s)
    };
    if take(&mut pos, 4)? != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap());
    if version != VERSION {
        return Err(CheckpointError::BadVersion(version));
    }
    let count = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
    let mut records: BTreeMap<String, Tensor> = BTreeMap::new();
    for _ in 0..count {
        let nlen = u16::from_le_bytes(take(&mut pos, 2)?.try_into().unwrap()) as usize;
        let name = std::str::from_utf8(take(&mut pos, nlen)?)
            .map_err(|_| CheckpointError::Malformed("non-utf8 tensor name".into()))?
            .to_string();
        let rank = take(&mut pos, 1)?[0] as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize);
        }
        let numel: usize = dims.iter().product();
        let raw = take(&mut pos, numel * 4)?;
        let data: Vec<f32> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let t = Tensor::new(dims, data)
            .map_err(|e| CheckpointError::Malformed(format!("record {name}: {e}")))?;
        if records.insert(name.clone(), t).is_some() {
            return Err(CheckpointError::Malformed(format!("duplicate record {name}")));
        }
    }
    if pos != bytes.len() {
        return Err(CheckpointError::Malformed("trailing bytes".into()));
    }

    // Two passes: verify every model tensor has a matching record first so a
    // mismatched file never leaves the model half-loaded.
    let mut problem: Option<String> = None;
    let mut seen = 0usize;
    model.visit_state("", &mut |name, t| {
        seen += 1;
        match records.get(name) {
            None => {
                if problem.is_none() {
                    problem = Some(format!("missing tensor {name}"));
                }
            }
            Some(r) if r.shape() != t.shape() => {
                if problem.is_none() {
                    problem = Some(format!(
                        "shape mismatch for {name}: file {:?}, model {:?}",
                        r.shape(),
                        t.shape()
                    ));
                }
            }
            Some(_) => {}
        }
    });
    if let Some(p) = problem {
        return Err(CheckpointError::Mismatch(p));
    }
    if seen != records.len() {
        return Err(CheckpointError::Mismatch(format!(
            "file has {} tensors, model expects {seen}",
            records.len()
        )));
    }
    model.visit_state("", &mut |name, t| {
        let r = &records[name];
        t.data_mut().copy_from_slice(r.data());
    });
    Ok(())
}
