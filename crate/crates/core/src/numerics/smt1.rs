//! Packed tensor files.
//!
//! Layout: ASCII `SMT1`, `u32` LE rank, `rank × u32` LE extents, `u8` dtype
//! code (0 = f32 LE, 1 = u8), then the row-major payload.

use std::fs;
use std::path::Path;

use super::Tensor;
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"SMT1";

#[derive(Debug, Clone, PartialEq)]
pub enum Smt1Payload {
    F32(Vec<f32>),
    U8(Vec<u8>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Smt1 {
    pub shape: Vec<usize>,
    pub payload: Smt1Payload,
}

impl Smt1 {
    pub fn from_tensor(t: &Tensor) -> Self {
        Self { shape: t.shape().to_vec(), payload: Smt1Payload::F32(t.data().to_vec()) }
    }

    pub fn from_u8(shape: Vec<usize>, bytes: Vec<u8>) -> Self {
        Self { shape, payload: Smt1Payload::U8(bytes) }
    }

    /// f32 view; u8 payloads are converted value-for-value (no scaling).
    pub fn to_tensor(&self) -> Result<Tensor> {
        let data = match &self.payload {
            Smt1Payload::F32(v) => v.clone(),
            Smt1Payload::U8(v) => v.iter().map(|&b| b as f32).collect(),
        };
        Tensor::new(self.shape.clone(), data)
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(self.shape.len() as u32).to_le_bytes());
        for &e in &self.shape {
            out.extend_from_slice(&(e as u32).to_le_bytes());
        }
        match &self.payload {
            Smt1Payload::F32(v) => {
                out.push(0);
                for x in v {
                    out.extend_from_slice(&x.to_le_bytes());
                }
            }
            Smt1Payload::U8(v) => {
                out.push(1);
                out.extend_from_slice(v);
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> std::result::Result<Self, String> {
        if bytes.len() < 9 || &bytes[..4] != MAGIC {
            return Err("missing SMT1 magic".into());
        }
        let read_u32 = |at: usize| -> std::result::Result<u32, String> {
            bytes.get(at..at + 4).map(|b| u32::from_le_bytes(b.try_into().unwrap())).ok_or_else(|| "truncated header".to_string())
        };
        let rank = read_u32(4)? as usize;
        let mut shape = Vec::with_capacity(rank);
        for i in 0..rank {
            shape.push(read_u32(8 + 4 * i)? as usize);
        }
        let at = 8 + 4 * rank;
        let code = *bytes.get(at).ok_or("truncated header")?;
        let body = &bytes[at + 1..];
        let n: usize = shape.iter().product();
        let payload = match code {
            0 => {
                if body.len() != 4 * n {
                    return Err(format!("expected {} payload bytes, found {}", 4 * n, body.len()));
                }
                Smt1Payload::F32(body.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect())
            }
            1 => {
                if body.len() != n {
                    return Err(format!("expected {} payload bytes, found {}", n, body.len()));
                }
                Smt1Payload::U8(body.to_vec())
            }
            other => return Err(format!("unknown dtype code {other}")),
        };
        Ok(Self { shape, payload })
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes).map_err(|msg| Error::Format { path: path.to_path_buf(), msg })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.encode()).map_err(|e| Error::io(path, e))
    }
}

pub fn read_tensor(path: &Path) -> Result<Tensor> {
    Smt1::read(path)?.to_tensor()
}

pub fn write_tensor(path: &Path, t: &Tensor) -> Result<()> {
    Smt1::from_tensor(t).write(path)
}
