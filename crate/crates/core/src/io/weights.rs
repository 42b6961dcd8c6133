//! `SEGW` weights container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "SEGW"  u32 version
//! u8 arch  u8 depth  u16 base_channels  u16 in_channels
//! u32 tensor_count
//! per tensor: u16 name_len, name bytes, u8 dtype (0 = f32, 1 = f64),
//!             u8 rank, u32 dims[rank], raw values
//! ```

use std::fs;
use std::path::Path;

use indexmap::IndexMap;

use crate::error::{Error, Result};
use crate::models::{Arch, ModelConfig, SegModel};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const WEIGHTS_MAGIC: &[u8; 4] = b"SEGW";
pub const WEIGHTS_VERSION: u32 = 1;

pub fn encode_weights<T: Scalar>(model: &SegModel<T>) -> Vec<u8> {
    let cfg = model.config();
    let mut out = Vec::new();
    out.extend_from_slice(WEIGHTS_MAGIC);
    out.extend_from_slice(&WEIGHTS_VERSION.to_le_bytes());
    out.push(cfg.arch.code());
    out.push(cfg.depth as u8);
    out.extend_from_slice(&(cfg.base_channels as u16).to_le_bytes());
    out.extend_from_slice(&(cfg.in_channels as u16).to_le_bytes());
    out.extend_from_slice(&(model.params().len() as u32).to_le_bytes());
    for (name, t) in model.params() {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(T::DTYPE);
        out.push(t.rank() as u8);
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in t.data() {
            v.write_le(&mut out);
        }
    }
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, tensor: &str, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Weights {
                tensor: tensor.to_string(),
                message: format!("truncated {what} at byte {}: need {n}, have {}", self.pos, self.bytes.len() - self.pos),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, tensor: &str, what: &str) -> Result<u8> {
        Ok(self.take(1, tensor, what)?[0])
    }

    fn u16(&mut self, tensor: &str, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, tensor, what)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self, tensor: &str, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, tensor, what)?.try_into().expect("4 bytes")))
    }
}

/// Header fields, readable without knowing the stored dtype.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WeightsHeader {
    pub version: u32,
    pub config: ModelConfig,
    pub tensor_count: u32,
    /// Dtype code of the first tensor, if any.
    pub dtype: Option<u8>,
}

fn read_header(cur: &mut Cursor<'_>) -> Result<WeightsHeader> {
    let magic = cur.take(4, "<header>", "magic")?;
    if magic != WEIGHTS_MAGIC {
        return Err(Error::Format(format!("bad weights magic {:?}", String::from_utf8_lossy(magic))));
    }
    let version = cur.u32("<header>", "version")?;
    if version != WEIGHTS_VERSION {
        return Err(Error::Format(format!("unsupported weights version {version}")));
    }
    let arch_code = cur.u8("<header>", "arch")?;
    let arch = Arch::from_code(arch_code).ok_or_else(|| Error::Format(format!("unknown arch code {arch_code}")))?;
    let depth = cur.u8("<header>", "depth")? as usize;
    let base_channels = cur.u16("<header>", "base_channels")? as usize;
    let in_channels = cur.u16("<header>", "in_channels")? as usize;
    let tensor_count = cur.u32("<header>", "tensor count")?;
    let config = ModelConfig { arch, depth, base_channels, in_channels };
    Ok(WeightsHeader { version, config, tensor_count, dtype: None })
}

/// Reads the header and the first tensor's dtype.
pub fn peek_weights(bytes: &[u8]) -> Result<WeightsHeader> {
    let mut cur = Cursor { bytes, pos: 0 };
    let mut header = read_header(&mut cur)?;
    if header.tensor_count > 0 {
        let len = cur.u16("<first>", "name length")? as usize;
        let name = String::from_utf8_lossy(cur.take(len, "<first>", "name")?).into_owned();
        header.dtype = Some(cur.u8(&name, "dtype")?);
    }
    Ok(header)
}

pub fn decode_weights<T: Scalar>(bytes: &[u8]) -> Result<SegModel<T>> {
    let mut cur = Cursor { bytes, pos: 0 };
    let header = read_header(&mut cur)?;
    let mut params = IndexMap::new();
    for index in 0..header.tensor_count {
        let placeholder = format!("#{index}");
        let len = cur.u16(&placeholder, "name length")? as usize;
        let name = std::str::from_utf8(cur.take(len, &placeholder, "name")?)
            .map_err(|_| Error::Weights { tensor: placeholder.clone(), message: "name is not UTF-8".into() })?
            .to_string();
        let dtype = cur.u8(&name, "dtype")?;
        if dtype != T::DTYPE {
            return Err(Error::Weights {
                tensor: name,
                message: format!("dtype code {dtype} does not match the run precision (code {})", T::DTYPE),
            });
        }
        let rank = cur.u8(&name, "rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(cur.u32(&name, "dims")? as usize);
        }
        let numel: usize = shape.iter().product();
        let raw = cur.take(numel * T::WIDTH, &name, "tensor payload")?;
        let data = raw.chunks_exact(T::WIDTH).map(T::read_le).collect();
        if params.contains_key(&name) {
            return Err(Error::Weights { tensor: name, message: "duplicate tensor name".into() });
        }
        params.insert(name, Tensor::new(shape, data)?);
    }
    if cur.pos != bytes.len() {
        return Err(Error::Format(format!("{} trailing bytes after last tensor", bytes.len() - cur.pos)));
    }
    SegModel::from_params(header.config, params)
}

pub fn save_weights<T: Scalar>(path: impl AsRef<Path>, model: &SegModel<T>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_weights(model)).map_err(|e| Error::io(path, e))
}

pub fn load_weights<T: Scalar>(path: impl AsRef<Path>) -> Result<SegModel<T>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_weights(&bytes)
}

/// Loads into an existing model, rejecting a different configuration.
pub fn load_weights_into<T: Scalar>(path: impl AsRef<Path>, model: &mut SegModel<T>) -> Result<()> {
    let loaded = load_weights::<T>(path)?;
    if loaded.config() != model.config() {
        return Err(Error::Config(format!(
            "weights hold {:?}, model is {:?}",
            loaded.config(),
            model.config()
        )));
    }
    *model = loaded;
    Ok(())
}
