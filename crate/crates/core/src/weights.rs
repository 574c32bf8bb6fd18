//! Versioned binary weights file.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic      4 bytes  "SWPW"
//! version    u32
//! fingerprint 32 bytes SHA-256 of the model config JSON
//! count      u32
//! count × { name_len u16, name, dtype u8 (0 = f32, 1 = f64), ndim u8,
//!           dims u64 × ndim, offset u64, nbytes u64 }
//! payload    row-major little-endian reals; offsets are relative to its start
//! ```

use std::path::Path;

use crate::config::SwinConfig;
use crate::error::{Error, Result};
use crate::model::PoseModel;
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"SWPW";
pub const VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Dtype {
    #[default]
    F32,
    F64,
}

impl Dtype {
    fn code(self) -> u8 {
        match self {
            Dtype::F32 => 0,
            Dtype::F64 => 1,
        }
    }

    fn from_code(code: u8) -> Result<Self> {
        match code {
            0 => Ok(Dtype::F32),
            1 => Ok(Dtype::F64),
            other => Err(Error::WeightsFormat(format!("unknown dtype code {other}"))),
        }
    }

    pub fn size(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TensorEntry {
    pub name: String,
    pub dtype: Dtype,
    pub shape: Vec<usize>,
    pub offset: u64,
    pub nbytes: u64,
}

/// A parsed file: header plus decoded tensors in directory order.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightsFile {
    pub version: u32,
    pub fingerprint: [u8; 32],
    pub entries: Vec<TensorEntry>,
    pub params: ParamStore,
}

/// Serializes every parameter of `model` with the given payload precision.
pub fn save_weights(model: &PoseModel, dtype: Dtype) -> Vec<u8> {
    encode(&model.config.fingerprint(), &model.params, dtype)
}

pub fn encode(fingerprint: &[u8; 32], params: &ParamStore, dtype: Dtype) -> Vec<u8> {
    let mut header = Vec::new();
    header.extend_from_slice(MAGIC);
    header.extend_from_slice(&VERSION.to_le_bytes());
    header.extend_from_slice(fingerprint);
    header.extend_from_slice(&(params.len() as u32).to_le_bytes());
    let mut payload = Vec::new();
    for (name, t) in params.iter() {
        let offset = payload.len() as u64;
        for &v in t.data() {
            match dtype {
                Dtype::F32 => payload.extend_from_slice(&(v as f32).to_le_bytes()),
                Dtype::F64 => payload.extend_from_slice(&v.to_le_bytes()),
            }
        }
        header.extend_from_slice(&(name.len() as u16).to_le_bytes());
        header.extend_from_slice(name.as_bytes());
        header.push(dtype.code());
        header.push(t.ndim() as u8);
        for &d in t.shape() {
            header.extend_from_slice(&(d as u64).to_le_bytes());
        }
        header.extend_from_slice(&offset.to_le_bytes());
        header.extend_from_slice(&(payload.len() as u64 - offset).to_le_bytes());
    }
    header.extend_from_slice(&payload);
    header
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::WeightsFormat(format!("truncated while reading {what} at byte {}", self.pos))
        })?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }
}

/// Parses and validates a weights file without reference to a config.
pub fn decode(bytes: &[u8]) -> Result<WeightsFile> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::WeightsFormat("bad magic".into()));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::WeightsVersion { found: version, expected: VERSION });
    }
    let fingerprint: [u8; 32] = r.take(32, "fingerprint")?.try_into().expect("32 bytes");
    let count = r.u32("tensor count")? as usize;
    let mut entries = Vec::new();
    for i in 0..count {
        let name_len = r.u16("name length")? as usize;
        let name = std::str::from_utf8(r.take(name_len, "name")?)
            .map_err(|_| Error::WeightsFormat(format!("tensor {i} name is not UTF-8")))?
            .to_string();
        let dtype = Dtype::from_code(r.u8("dtype")?)?;
        let ndim = r.u8("ndim")? as usize;
        let mut shape = Vec::with_capacity(ndim);
        let mut numel: u64 = 1;
        for _ in 0..ndim {
            let d = r.u64("dim")?;
            numel = numel
                .checked_mul(d)
                .ok_or_else(|| Error::WeightsFormat(format!("tensor `{name}` shape overflows")))?;
            shape.push(usize::try_from(d).map_err(|_| Error::WeightsFormat(format!("tensor `{name}` dim too large")))?);
        }
        let offset = r.u64("offset")?;
        let nbytes = r.u64("nbytes")?;
        if numel.checked_mul(dtype.size() as u64) != Some(nbytes) {
            return Err(Error::WeightsFormat(format!(
                "tensor `{name}` declares {nbytes} bytes for shape {shape:?}"
            )));
        }
        entries.push(TensorEntry { name, dtype, shape, offset, nbytes });
    }
    let payload = &bytes[r.pos..];

    let mut spans: Vec<(u64, u64, &str)> = entries.iter().map(|e| (e.offset, e.nbytes, e.name.as_str())).collect();
    spans.sort_unstable();
    let mut cursor = 0u64;
    for (offset, nbytes, name) in spans {
        if offset < cursor {
            return Err(Error::WeightsFormat(format!("tensor `{name}` overlaps its predecessor")));
        }
        cursor = offset
            .checked_add(nbytes)
            .filter(|&end| end <= payload.len() as u64)
            .ok_or_else(|| Error::WeightsFormat(format!("tensor `{name}` runs past the end of the payload")))?;
    }

    let mut params = ParamStore::new();
    for e in &entries {
        let raw = &payload[e.offset as usize..(e.offset + e.nbytes) as usize];
        let data: Vec<f64> = match e.dtype {
            Dtype::F32 => raw.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().expect("4")) as f64).collect(),
            Dtype::F64 => raw.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().expect("8"))).collect(),
        };
        if params.get(&e.name).is_ok() {
            return Err(Error::WeightsFormat(format!("duplicate tensor `{}`", e.name)));
        }
        params.insert(e.name.clone(), Tensor::new(e.shape.clone(), data)?);
    }
    Ok(WeightsFile { version, fingerprint, entries, params })
}

/// Decodes `bytes` and checks them against `config`.
pub fn load_weights(bytes: &[u8], config: &SwinConfig) -> Result<PoseModel> {
    let file = decode(bytes)?;
    if file.fingerprint != config.fingerprint() {
        return Err(Error::FingerprintMismatch);
    }
    PoseModel::from_params(config.clone(), file.params)
}

pub fn save_to_path(model: &PoseModel, dtype: Dtype, path: &Path) -> Result<()> {
    Ok(std::fs::write(path, save_weights(model, dtype))?)
}

pub fn load_from_path(path: &Path, config: &SwinConfig) -> Result<PoseModel> {
    load_weights(&std::fs::read(path)?, config)
}
