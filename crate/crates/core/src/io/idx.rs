//! IDX files (the MNIST container) with unsigned-byte payloads.

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub enum IdxData {
    /// `[N, C, H, W]` scaled to `[0, 1]`.
    Images(Tensor<f32>),
    Labels(Vec<usize>),
}

const UBYTE: u8 = 0x08;

pub fn parse_idx(bytes: &[u8]) -> Result<IdxData> {
    let fmt = |offset: usize, msg: &str| Error::Format {
        offset,
        msg: msg.to_string(),
    };
    if bytes.len() < 4 {
        return Err(fmt(bytes.len(), "IDX header truncated"));
    }
    if bytes[0] != 0 || bytes[1] != 0 {
        return Err(fmt(0, "bad IDX magic"));
    }
    if bytes[2] != UBYTE {
        return Err(fmt(2, "only unsigned-byte IDX payloads are supported"));
    }
    let ndims = bytes[3] as usize;
    if !matches!(ndims, 1 | 3 | 4) {
        return Err(fmt(3, "IDX files must have 1, 3 or 4 dimensions"));
    }
    let header = 4 + 4 * ndims;
    if bytes.len() < header {
        return Err(fmt(bytes.len(), "IDX dimension table truncated"));
    }
    let dims: Vec<usize> = (0..ndims)
        .map(|i| u32::from_be_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap()) as usize)
        .collect();
    let count: usize = dims.iter().product();
    let payload = &bytes[header..];
    if payload.len() < count {
        return Err(fmt(bytes.len(), "IDX payload truncated"));
    }
    if payload.len() > count {
        return Err(fmt(header + count, "trailing bytes after IDX payload"));
    }
    if ndims == 1 {
        return Ok(IdxData::Labels(payload.iter().map(|&b| b as usize).collect()));
    }
    let shape = if ndims == 3 {
        vec![dims[0], 1, dims[1], dims[2]]
    } else {
        dims
    };
    let data = payload.iter().map(|&b| b as f32 / 255.0).collect();
    Ok(IdxData::Images(Tensor::from_vec_unchecked(&shape, data)?))
}

pub fn load_idx(path: &Path) -> Result<IdxData> {
    parse_idx(&std::fs::read(path)?)
}
