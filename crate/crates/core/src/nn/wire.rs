//! Model upload format.
//!
//! ```text
//! magic    4 bytes  "KD3A"
//! version  u16 LE
//! layers   u32 LE
//! manifest per layer: kind u8 (0 = linear, 1 = batchnorm), dim_a u32 LE, dim_b u32 LE
//!          linear: (inputs, outputs); batchnorm: (channels, 0)
//! body     f32 LE values in manifest order
//!          linear: weight (outputs x inputs, row-major), bias
//!          batchnorm: gamma, beta, running_mean, running_var
//! ```

use super::params::{BatchNormParams, Layer, LayerKind, LinearParams, ModelParams};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"KD3A";
pub const WIRE_VERSION: u16 = 1;

const KIND_LINEAR: u8 = 0;
const KIND_BATCHNORM: u8 = 1;
const HEADER_LEN: usize = 4 + 2 + 4;
const MANIFEST_ENTRY_LEN: usize = 1 + 4 + 4;

/// Exact byte size of `encode(params)`.
pub fn encoded_len(params: &ModelParams<f32>) -> usize {
    HEADER_LEN + MANIFEST_ENTRY_LEN * params.layers().len() + 4 * params.num_values()
}

pub fn encode(params: &ModelParams<f32>) -> Vec<u8> {
    let mut out = Vec::with_capacity(encoded_len(params));
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&WIRE_VERSION.to_le_bytes());
    out.extend_from_slice(&(params.layers().len() as u32).to_le_bytes());
    for kind in params.manifest() {
        let (tag, a, b) = match kind {
            LayerKind::Linear { inputs, outputs } => (KIND_LINEAR, inputs, outputs),
            LayerKind::BatchNorm { channels } => (KIND_BATCHNORM, channels, 0),
        };
        out.push(tag);
        out.extend_from_slice(&(a as u32).to_le_bytes());
        out.extend_from_slice(&(b as u32).to_le_bytes());
    }
    for (tensor, _) in params.tensors() {
        for v in tensor {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
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
            .ok_or_else(|| Error::Wire(format!("truncated at byte {}", self.pos)))?;
        let slice = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(slice)
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

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let len = n
            .checked_mul(4)
            .ok_or_else(|| Error::Wire("tensor too large".into()))?;
        Ok(self
            .take(len)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

pub fn decode(bytes: &[u8]) -> Result<ModelParams<f32>> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Wire("bad magic".into()));
    }
    let version = r.u16()?;
    if version != WIRE_VERSION {
        return Err(Error::Wire(format!("unsupported version {version}")));
    }
    let count = r.u32()? as usize;
    let mut manifest = Vec::with_capacity(count.min(1024));
    for _ in 0..count {
        let tag = r.u8()?;
        let a = r.u32()? as usize;
        let b = r.u32()? as usize;
        manifest.push(match tag {
            KIND_LINEAR => LayerKind::Linear {
                inputs: a,
                outputs: b,
            },
            KIND_BATCHNORM if b == 0 => LayerKind::BatchNorm { channels: a },
            _ => return Err(Error::Wire(format!("bad layer entry ({tag}, {a}, {b})"))),
        });
    }
    let mut layers = Vec::with_capacity(count);
    for kind in manifest {
        layers.push(match kind {
            LayerKind::Linear { inputs, outputs } => Layer::Linear(LinearParams {
                inputs,
                outputs,
                weight: r.f32s(
                    inputs
                        .checked_mul(outputs)
                        .ok_or_else(|| Error::Wire("tensor too large".into()))?,
                )?,
                bias: r.f32s(outputs)?,
            }),
            LayerKind::BatchNorm { channels } => Layer::BatchNorm(BatchNormParams {
                gamma: r.f32s(channels)?,
                beta: r.f32s(channels)?,
                running_mean: r.f32s(channels)?,
                running_var: r.f32s(channels)?,
            }),
        });
    }
    if r.pos != bytes.len() {
        return Err(Error::Wire(format!(
            "{} trailing bytes",
            bytes.len() - r.pos
        )));
    }
    ModelParams::new(layers)
}
