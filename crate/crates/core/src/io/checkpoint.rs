//! `RTFS` checkpoints.
//!
//! ```text
//! "RTFS" | version u32 | config_len u32 | config (UTF-8 key=value lines)
//! | tensor_count u32
//! | per tensor: name_len u16 | name | dtype u8 | rank u8 | dims u32 x rank | offset u64
//! | payloads (f32, offsets relative to the first payload byte)
//! | crc32 u32 over everything before it
//! ```
//!
//! Little-endian throughout; dtype 0 is f32.

use std::path::Path;

use super::write_atomic;
use crate::error::{Error, Result};
use crate::model::RtformerNet;
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"RTFS";
pub const CHECKPOINT_VERSION: u32 = 1;
const DTYPE_F32: u8 = 0;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: Vec<(String, String)>,
    pub tensors: Vec<(String, Tensor<f32>)>,
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Format {
                offset: self.pos,
                msg: format!("truncated {what}"),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
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
}

impl Checkpoint {
    pub fn from_net(net: &RtformerNet<f32>) -> Self {
        Checkpoint {
            config: net.config_record(),
            tensors: net.tensors(),
        }
    }

    pub fn into_net(self) -> Result<RtformerNet<f32>> {
        RtformerNet::from_record(&self.config, self.tensors)
    }

    pub fn is_fused(&self) -> bool {
        self.config.iter().any(|(k, v)| k == "fused" && v == "1")
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut config = String::new();
        for (k, v) in &self.config {
            if k.contains(['=', '\n']) || v.contains('\n') {
                return Err(Error::Config(format!("config entry `{k}` cannot be serialized")));
            }
            config.push_str(k);
            config.push('=');
            config.push_str(v);
            config.push('\n');
        }
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(config.len() as u32).to_le_bytes());
        out.extend_from_slice(config.as_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        let mut offset = 0u64;
        for (name, t) in &self.tensors {
            if name.len() > u16::MAX as usize || t.rank() > u8::MAX as usize {
                return Err(Error::Config(format!("tensor `{name}` cannot be serialized")));
            }
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(DTYPE_F32);
            out.push(t.rank() as u8);
            for &d in t.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            out.extend_from_slice(&offset.to_le_bytes());
            offset += 4 * t.numel() as u64;
        }
        for (_, t) in &self.tensors {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 {
            return Err(Error::Format {
                offset: bytes.len(),
                msg: "checkpoint too short".into(),
            });
        }
        if &bytes[..4] != CHECKPOINT_MAGIC {
            return Err(Error::Format {
                offset: 0,
                msg: "bad checkpoint magic".into(),
            });
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != CHECKPOINT_VERSION {
            return Err(Error::Version {
                found: version,
                expected: CHECKPOINT_VERSION,
            });
        }
        let body_len = bytes.len() - 4;
        let stored = u32::from_le_bytes(bytes[body_len..].try_into().unwrap());
        let computed = crc32fast::hash(&bytes[..body_len]);
        if stored != computed {
            return Err(Error::Checksum { stored, computed });
        }

        let mut r = Reader {
            bytes: &bytes[..body_len],
            pos: 8,
        };
        let config_len = r.u32("config length")? as usize;
        let config_start = r.pos;
        let text = std::str::from_utf8(r.take(config_len, "config record")?).map_err(|e| Error::Format {
            offset: config_start + e.valid_up_to(),
            msg: "config record is not UTF-8".into(),
        })?;
        let mut config = Vec::new();
        for line in text.lines() {
            let Some((k, v)) = line.split_once('=') else {
                return Err(Error::Format {
                    offset: config_start,
                    msg: format!("config line `{line}` lacks `=`"),
                });
            };
            config.push((k.to_string(), v.to_string()));
        }

        let count = r.u32("tensor count")? as usize;
        let mut dir = Vec::with_capacity(count.min(4096));
        for _ in 0..count {
            let entry = r.pos;
            let name_len = r.u16("tensor name length")? as usize;
            let name = std::str::from_utf8(r.take(name_len, "tensor name")?)
                .map_err(|_| Error::Format {
                    offset: entry + 2,
                    msg: "tensor name is not UTF-8".into(),
                })?
                .to_string();
            let dtype = r.u8("dtype")?;
            if dtype != DTYPE_F32 {
                return Err(Error::Format {
                    offset: r.pos - 1,
                    msg: format!("unsupported dtype {dtype} for `{name}`"),
                });
            }
            let rank = r.u8("rank")? as usize;
            let shape = (0..rank)
                .map(|_| r.u32("dims").map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let offset = r.u64("payload offset")?;
            dir.push((entry, name, shape, offset));
        }

        let payload_start = r.pos;
        let payload = &bytes[payload_start..body_len];
        let mut expected = 0u64;
        let mut tensors = Vec::with_capacity(dir.len());
        for (entry, name, shape, offset) in dir {
            let n: usize = shape.iter().product();
            if offset != expected || offset + 4 * n as u64 > payload.len() as u64 {
                return Err(Error::Format {
                    offset: entry,
                    msg: format!("payload of `{name}` is out of place or out of bounds"),
                });
            }
            let start = offset as usize;
            let data = payload[start..start + 4 * n]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            tensors.push((name, Tensor::from_vec_unchecked(&shape, data)?));
            expected += 4 * n as u64;
        }
        if expected != payload.len() as u64 {
            return Err(Error::Format {
                offset: payload_start + expected as usize,
                msg: "unreferenced bytes after the last payload".into(),
            });
        }
        Ok(Checkpoint { config, tensors })
    }
}

pub fn save_checkpoint(path: &Path, net: &RtformerNet<f32>) -> Result<()> {
    write_atomic(path, &Checkpoint::from_net(net).to_bytes()?)
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::from_bytes(&std::fs::read(path)?)
}

pub fn load_checkpoint(path: &Path) -> Result<RtformerNet<f32>> {
    read_checkpoint(path)?.into_net()
}
