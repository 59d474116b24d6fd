//! Binary parameter files.
//!
//! Layout: the ASCII magic `PCGPT1`, a little-endian `u64` header length, a
//! JSON header, then every parameter as little-endian `f32` values in
//! manifest order.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::tensor::{numel, ParamStore, Tensor};
use crate::{Scalar, TensorError};

pub const MAGIC: &[u8; 6] = b"PCGPT1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Offset into the data section, in values.
    pub offset: usize,
    pub len: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub model: serde_json::Value,
    pub params: Vec<ParamEntry>,
}

fn bad(msg: impl Into<String>) -> TensorError {
    TensorError::Checkpoint(msg.into())
}

pub fn write_checkpoint<T: Scalar, W: Write>(
    out: &mut W,
    model: &serde_json::Value,
    params: &ParamStore<T>,
) -> Result<(), TensorError> {
    let mut entries = Vec::with_capacity(params.len());
    let mut offset = 0;
    for (_, name, t) in params.iter() {
        entries.push(ParamEntry {
            name: name.to_string(),
            shape: t.shape().to_vec(),
            offset,
            len: t.len(),
        });
        offset += t.len();
    }
    let header = serde_json::to_vec(&CheckpointHeader {
        model: model.clone(),
        params: entries,
    })
    .map_err(|e| bad(e.to_string()))?;
    out.write_all(MAGIC)?;
    out.write_all(&(header.len() as u64).to_le_bytes())?;
    out.write_all(&header)?;
    let mut data = Vec::with_capacity(offset * 4);
    for (_, _, t) in params.iter() {
        for v in t.data() {
            data.extend_from_slice(&v.to_f32().expect("finite parameter").to_le_bytes());
        }
    }
    out.write_all(&data)?;
    Ok(())
}

pub fn read_header<R: Read>(input: &mut R) -> Result<CheckpointHeader, TensorError> {
    let mut magic = [0u8; 6];
    input.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(bad("bad magic"));
    }
    let mut len = [0u8; 8];
    input.read_exact(&mut len)?;
    let len = usize::try_from(u64::from_le_bytes(len)).map_err(|_| bad("header too large"))?;
    let mut header = vec![0u8; len];
    input.read_exact(&mut header)?;
    let header: CheckpointHeader = serde_json::from_slice(&header).map_err(|e| bad(e.to_string()))?;
    let mut expected = 0;
    for p in &header.params {
        if p.offset != expected || p.len != numel(&p.shape) {
            return Err(bad(format!("inconsistent manifest entry {}", p.name)));
        }
        expected += p.len;
    }
    Ok(header)
}

pub fn read_checkpoint<T: Scalar, R: Read>(
    input: &mut R,
) -> Result<(CheckpointHeader, ParamStore<T>), TensorError> {
    let header = read_header(input)?;
    let total: usize = header.params.iter().map(|p| p.len).sum();
    let mut raw = vec![0u8; total * 4];
    input.read_exact(&mut raw)?;
    let mut trailing = [0u8; 1];
    if input.read(&mut trailing)? != 0 {
        return Err(bad("trailing bytes after parameter data"));
    }
    let values: Vec<f32> = raw
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    let mut store = ParamStore::new();
    for p in &header.params {
        let data = values[p.offset..p.offset + p.len]
            .iter()
            .map(|v| T::from_f64_lossy(f64::from(*v)))
            .collect();
        store.add(p.name.clone(), Tensor::new(&p.shape, data)?);
    }
    Ok((header, store))
}
