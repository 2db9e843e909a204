// SPDX-License-Identifier: MIT OR Apache-2.0

//! Binary weight files.
//!
//! Checkpoint layout (all integers `u32` little-endian):
//!
//! ```text
//! b"TALECKPT" | version | n_layers | n_heads | d_model | max_positions
//! | layernorm_eps (f64) | parameter blocks
//! ```
//!
//! Parameter blocks are raw little-endian `f64` values in the canonical order
//! of [`param_slots`](super::param_slots); shapes follow from the config.
//!
//! Matrix files use `b"TALEMATX" | version | rows | cols | values`.

use std::fs;
use std::path::Path;

use talelab_numkernel::Tensor;

use super::{param_slots, Model, ModelConfig, ModelParams};
use crate::error::{io_err, LabError, Result};

const CKPT_MAGIC: &[u8; 8] = b"TALECKPT";
const MATRIX_MAGIC: &[u8; 8] = b"TALEMATX";
const VERSION: u32 = 1;

fn put_u32(buf: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| LabError::Format {
        kind: "checkpoint",
        reason: format!("{v} does not fit in u32"),
    })?;
    buf.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

fn put_f64s(buf: &mut Vec<u8>, values: &[f64]) {
    buf.reserve(values.len() * 8);
    for v in values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

struct Reader<'a> {
    kind: &'static str,
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn err(&self, reason: impl Into<String>) -> LabError {
        LabError::Format {
            kind: self.kind,
            reason: reason.into(),
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.at < n {
            return Err(self.err(format!("truncated at byte {}", self.at)));
        }
        let s = &self.bytes[self.at..self.at + n];
        self.at += n;
        Ok(s)
    }

    fn header(&mut self, magic: &[u8; 8]) -> Result<()> {
        if self.take(8)? != magic {
            return Err(self.err("bad magic"));
        }
        let v = self.u32()?;
        if v != VERSION as usize {
            return Err(self.err(format!("unsupported version {v}")));
        }
        Ok(())
    }

    fn u32(&mut self) -> Result<usize> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")) as usize)
    }

    fn f64(&mut self) -> Result<f64> {
        let b = self.take(8)?;
        Ok(f64::from_le_bytes(b.try_into().expect("8 bytes")))
    }

    fn tensor(&mut self, shape: Vec<usize>) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| self.f64()).collect::<Result<Vec<_>>>()?;
        Tensor::new(shape, data).map_err(|e| self.err(e.to_string()))
    }

    fn finish(&self) -> Result<()> {
        if self.at != self.bytes.len() {
            return Err(self.err(format!("{} trailing bytes", self.bytes.len() - self.at)));
        }
        Ok(())
    }
}

impl Model {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let c = &self.config;
        let mut buf = Vec::with_capacity(48 + 8 * c.n_params());
        buf.extend_from_slice(CKPT_MAGIC);
        put_u32(&mut buf, VERSION as usize)?;
        for v in [c.n_layers, c.n_heads, c.d_model, c.max_positions] {
            put_u32(&mut buf, v)?;
        }
        put_f64s(&mut buf, &[c.layernorm_eps]);
        for t in self.params.tensors() {
            put_f64s(&mut buf, t.data());
        }
        Ok(buf)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader {
            kind: "checkpoint",
            bytes,
            at: 0,
        };
        r.header(CKPT_MAGIC)?;
        let config = ModelConfig {
            n_layers: r.u32()?,
            n_heads: r.u32()?,
            d_model: r.u32()?,
            max_positions: r.u32()?,
            layernorm_eps: r.f64()?,
        };
        config.validate()?;
        let tensors = param_slots(&config)
            .into_iter()
            .map(|s| r.tensor(s.shape))
            .collect::<Result<Vec<_>>>()?;
        r.finish()?;
        let params = ModelParams::from_canonical(config.n_layers, tensors).expect("slot count");
        Model::from_params(config, params)
    }
}

pub fn save_checkpoint(model: &Model, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, model.to_bytes()?).map_err(io_err(path))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Model> {
    let path = path.as_ref();
    Model::from_bytes(&fs::read(path).map_err(io_err(path))?)
}

pub fn matrix_to_bytes(m: &Tensor) -> Result<Vec<u8>> {
    let (rows, cols) = m.dims2("matrix file")?;
    let mut buf = Vec::with_capacity(20 + 8 * m.len());
    buf.extend_from_slice(MATRIX_MAGIC);
    put_u32(&mut buf, VERSION as usize)?;
    put_u32(&mut buf, rows)?;
    put_u32(&mut buf, cols)?;
    put_f64s(&mut buf, m.data());
    Ok(buf)
}

pub fn matrix_from_bytes(bytes: &[u8]) -> Result<Tensor> {
    let mut r = Reader {
        kind: "matrix",
        bytes,
        at: 0,
    };
    r.header(MATRIX_MAGIC)?;
    let rows = r.u32()?;
    let cols = r.u32()?;
    let t = r.tensor(vec![rows, cols])?;
    r.finish()?;
    Ok(t)
}

pub fn write_matrix(m: &Tensor, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, matrix_to_bytes(m)?).map_err(io_err(path))
}

pub fn read_matrix(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    matrix_from_bytes(&fs::read(path).map_err(io_err(path))?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn model_round_trip_is_byte_exact() {
        let m = Model::init(ModelConfig { n_layers: 2, ..ModelConfig::desk() }, 7).unwrap();
        let bytes = m.to_bytes().unwrap();
        let back = Model::from_bytes(&bytes).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.to_bytes().unwrap(), bytes);
    }

    #[test]
    fn rejects_corruption() {
        let m = Model::init(ModelConfig { n_layers: 1, ..ModelConfig::desk() }, 7).unwrap();
        let mut bytes = m.to_bytes().unwrap();
        assert!(Model::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        bytes.push(0);
        assert!(Model::from_bytes(&bytes).is_err());
        let mut bad = m.to_bytes().unwrap();
        bad[0] = b'X';
        assert!(Model::from_bytes(&bad).is_err());
        assert!(matrix_from_bytes(&m.to_bytes().unwrap()).is_err());
    }

    #[test]
    fn matrix_round_trip() {
        let t = Tensor::from_fn(3, 2, |r, c| (r * 2 + c) as f64 - 0.5);
        assert_eq!(matrix_from_bytes(&matrix_to_bytes(&t).unwrap()).unwrap(), t);
    }
}
