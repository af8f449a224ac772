//! Self-describing binary checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic     8 bytes  "NGCKPT01"
//! hdr_len   u32      length of the JSON header
//! header    bytes    {"format_version":1,"config":{...},"special":{...}}
//! n_params  u32
//! per parameter, in canonical key order:
//!   key_len u16, key utf-8 (e.g. "l3.ffn.w_up")
//!   ndim    u8,  dims u32 × ndim
//!   values  f64 × prod(dims), little-endian bit patterns
//! ```
//!
//! Round-trips are bit-exact: values are moved as raw u64 bit patterns.
//! The reader never trusts a declared length without checking the bytes
//! actually present, and verifies the parameter set matches the config.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::model::{parse_param_key, ModelConfig, SpecialTokens, ToyModel};

const MAGIC: &[u8; 8] = b"NGCKPT01";
const FORMAT_VERSION: u32 = 1;
/// Sanity bound applied before any allocation driven by file contents.
const MAX_HEADER_LEN: usize = 1 << 20;

#[derive(Serialize, Deserialize)]
struct Header {
    format_version: u32,
    config: ModelConfig,
    special: SpecialTokens,
}

pub fn encode_checkpoint(model: &ToyModel) -> Result<Vec<u8>> {
    let header = serde_json::to_vec(&Header {
        format_version: FORMAT_VERSION,
        config: model.config.clone(),
        special: model.special,
    })
    .map_err(|e| Error::Format(format!("header encode: {e}")))?;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&(model.params().len() as u32).to_le_bytes());
    for (key, tensor) in model.params() {
        let key_s = key.to_string();
        out.extend_from_slice(&(key_s.len() as u16).to_le_bytes());
        out.extend_from_slice(key_s.as_bytes());
        out.push(tensor.shape().len() as u8);
        for &d in tensor.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in tensor.data() {
            out.extend_from_slice(&v.to_bits().to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Format(format!(
                "truncated checkpoint: needed {n} bytes at offset {}",
                self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
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
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<ToyModel> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(Error::Format("bad checkpoint magic".into()));
    }
    let hdr_len = r.u32()? as usize;
    if hdr_len > MAX_HEADER_LEN {
        return Err(Error::Format(format!("header of {hdr_len} bytes")));
    }
    let header: Header = serde_json::from_slice(r.take(hdr_len)?)
        .map_err(|e| Error::Format(format!("header decode: {e}")))?;
    if header.format_version != FORMAT_VERSION {
        return Err(Error::Format(format!(
            "unsupported checkpoint version {}",
            header.format_version
        )));
    }
    header.config.validate()?;

    let n_params = r.u32()? as usize;
    let mut params = BTreeMap::new();
    for _ in 0..n_params {
        let key_len = r.u16()? as usize;
        let key_bytes = r.take(key_len)?;
        let key_s = std::str::from_utf8(key_bytes)
            .map_err(|_| Error::Format("non-utf8 parameter key".into()))?;
        let key = parse_param_key(key_s)
            .ok_or_else(|| Error::Format(format!("unknown parameter key {key_s:?}")))?;
        let ndim = r.u8()? as usize;
        if ndim > 2 {
            return Err(Error::Format(format!("{ndim}-dimensional parameter")));
        }
        let mut shape = Vec::with_capacity(ndim);
        let mut numel: usize = 1;
        for _ in 0..ndim {
            let d = r.u32()? as usize;
            numel = numel
                .checked_mul(d)
                .ok_or_else(|| Error::Format("parameter size overflow".into()))?;
            shape.push(d);
        }
        let raw = r.take(
            numel
                .checked_mul(8)
                .ok_or_else(|| Error::Format("parameter size overflow".into()))?,
        )?;
        let mut data = Vec::with_capacity(numel);
        for chunk in raw.chunks_exact(8) {
            data.push(f64::from_bits(u64::from_le_bytes(
                chunk.try_into().unwrap(),
            )));
        }
        if params.insert(key, Tensor::new(shape, data)?).is_some() {
            return Err(Error::Format(format!("duplicate parameter {key_s:?}")));
        }
    }
    if r.pos != bytes.len() {
        return Err(Error::Format(format!(
            "{} trailing bytes after parameters",
            bytes.len() - r.pos
        )));
    }
    ToyModel::from_parts(header.config, header.special, params)
}

pub fn write_checkpoint(model: &ToyModel, path: &Path) -> Result<()> {
    std::fs::write(path, encode_checkpoint(model)?)?;
    Ok(())
}

pub fn read_checkpoint(path: &Path) -> Result<ToyModel> {
    decode_checkpoint(&std::fs::read(path)?)
}
