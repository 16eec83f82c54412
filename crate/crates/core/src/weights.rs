//! Single-file weight container.
//!
//! Layout: one magic line, one JSON header line, then the raw little-endian
//! tensor bytes. The header records the format version, a free-form model
//! config and an index of `{name, shape, dtype, kind, byte_offset, byte_len}`
//! with offsets relative to the first data byte. Several parameter groups
//! (student, heads, EMA copies) share one file under `group/name` keys.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::params::{EntryKind, ParamId, ParamLayout, Params, Real};

pub const WEIGHTS_VERSION: u32 = 1;
const MAGIC: &str = "CROSSMAG-WEIGHTS";

#[derive(Debug, Error)]
pub enum WeightsError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: malformed weight file: {msg}")]
    Format { path: PathBuf, msg: String },
    #[error("tensor {name}: {msg}")]
    Tensor { name: String, msg: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorIndex {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub kind: String,
    pub byte_offset: usize,
    pub byte_len: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightHeader {
    pub format_version: u32,
    pub config: serde_json::Value,
    pub tensors: Vec<TensorIndex>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WeightFile {
    pub header: WeightHeader,
    data: Vec<u8>,
}

fn kind_str(k: EntryKind) -> &'static str {
    match k {
        EntryKind::Weight => "weight",
        EntryKind::Buffer => "buffer",
    }
}

impl WeightFile {
    pub fn new(config: serde_json::Value) -> Self {
        Self {
            header: WeightHeader { format_version: WEIGHTS_VERSION, config, tensors: Vec::new() },
            data: Vec::new(),
        }
    }

    /// Appends every entry of `params` under `group/`.
    pub fn add_group<F: Real>(&mut self, group: &str, params: &Params<F>) {
        for (i, e) in params.layout().entries().iter().enumerate() {
            let bytes = params.entry_bytes(ParamId(i));
            self.header.tensors.push(TensorIndex {
                name: format!("{group}/{}", e.name),
                shape: e.shape.clone(),
                dtype: F::DTYPE.to_string(),
                kind: kind_str(e.kind).to_string(),
                byte_offset: self.data.len(),
                byte_len: bytes.len(),
            });
            self.data.extend_from_slice(&bytes);
        }
    }

    pub fn groups(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for t in &self.header.tensors {
            let g = t.name.split('/').next().unwrap_or_default().to_string();
            if !out.contains(&g) {
                out.push(g);
            }
        }
        out
    }

    /// Rebuilds a group against an expected layout. Names, shapes, kinds and
    /// dtype must all match.
    pub fn group<F: Real>(&self, group: &str, layout: &Arc<ParamLayout>) -> Result<Params<F>, WeightsError> {
        let mut data = Vec::with_capacity(layout.total());
        for e in layout.entries() {
            let name = format!("{group}/{}", e.name);
            let t = self
                .header
                .tensors
                .iter()
                .find(|t| t.name == name)
                .ok_or_else(|| WeightsError::Tensor { name: name.clone(), msg: "missing".into() })?;
            let bad = |msg: String| WeightsError::Tensor { name: name.clone(), msg };
            if t.shape != e.shape {
                return Err(bad(format!("shape {:?}, expected {:?}", t.shape, e.shape)));
            }
            if t.dtype != F::DTYPE {
                return Err(bad(format!("dtype {}, expected {}", t.dtype, F::DTYPE)));
            }
            if t.kind != kind_str(e.kind) {
                return Err(bad(format!("kind {}, expected {}", t.kind, kind_str(e.kind))));
            }
            let end = t.byte_offset + t.byte_len;
            if t.byte_len != e.len * F::BYTES || end > self.data.len() {
                return Err(bad("byte range out of bounds".into()));
            }
            data.extend(self.data[t.byte_offset..end].chunks_exact(F::BYTES).map(F::read_le));
        }
        Ok(Params::from_data(layout.clone(), data))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = serde_json::to_string(&self.header).expect("header serializes");
        let mut out = Vec::with_capacity(self.data.len() + header.len() + 32);
        out.extend_from_slice(MAGIC.as_bytes());
        out.push(b'\n');
        out.extend_from_slice(header.as_bytes());
        out.push(b'\n');
        out.extend_from_slice(&self.data);
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self, WeightsError> {
        let fmt = |msg: &str| WeightsError::Format { path: path.to_path_buf(), msg: msg.to_string() };
        let nl1 = bytes.iter().position(|&b| b == b'\n').ok_or_else(|| fmt("no magic line"))?;
        if &bytes[..nl1] != MAGIC.as_bytes() {
            return Err(fmt("bad magic"));
        }
        let rest = &bytes[nl1 + 1..];
        let nl2 = rest.iter().position(|&b| b == b'\n').ok_or_else(|| fmt("no header line"))?;
        let header: WeightHeader =
            serde_json::from_slice(&rest[..nl2]).map_err(|e| fmt(&format!("header: {e}")))?;
        if header.format_version != WEIGHTS_VERSION {
            return Err(fmt(&format!("unsupported format_version {}", header.format_version)));
        }
        Ok(Self { header, data: rest[nl2 + 1..].to_vec() })
    }

    /// Writes the file and returns its SHA-256.
    pub fn save(&self, path: &Path) -> Result<String, WeightsError> {
        let bytes = self.to_bytes();
        let io = |source| WeightsError::Io { path: path.to_path_buf(), source };
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(io)?;
        }
        let mut f = fs::File::create(path).map_err(|source| WeightsError::Io { path: path.to_path_buf(), source })?;
        f.write_all(&bytes).map_err(|source| WeightsError::Io { path: path.to_path_buf(), source })?;
        Ok(sha256_hex(&bytes))
    }

    pub fn load(path: &Path) -> Result<Self, WeightsError> {
        let bytes = fs::read(path).map_err(|source| WeightsError::Io { path: path.to_path_buf(), source })?;
        Self::from_bytes(&bytes, path)
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn file_sha256(path: &Path) -> Result<String, WeightsError> {
    let bytes = fs::read(path).map_err(|source| WeightsError::Io { path: path.to_path_buf(), source })?;
    Ok(sha256_hex(&bytes))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::{EncoderConfig, Vit};

    #[test]
    fn save_load_is_bit_identical() {
        let dir = tempfile::tempdir().unwrap();
        let vit = Vit::new(EncoderConfig::toy_student()).unwrap();
        let p = vit.init_params::<f32>(3);
        let mut wf = WeightFile::new(serde_json::to_value(vit.config()).unwrap());
        wf.add_group("student", &p);
        let path = dir.path().join("w.bin");
        let h1 = wf.save(&path).unwrap();
        let back = WeightFile::load(&path).unwrap();
        assert_eq!(back, wf);
        let q: Params<f32> = back.group("student", vit.layout()).unwrap();
        assert_eq!(q.data(), p.data());
        assert_eq!(h1, file_sha256(&path).unwrap());
        let cfg: EncoderConfig = serde_json::from_value(back.header.config.clone()).unwrap();
        assert_eq!(&cfg, vit.config());
    }

    #[test]
    fn mismatches_are_rejected() {
        let vit = Vit::new(EncoderConfig::toy_student()).unwrap();
        let p = vit.init_params::<f32>(3);
        let mut wf = WeightFile::new(serde_json::Value::Null);
        wf.add_group("student", &p);
        assert!(wf.group::<f64>("student", vit.layout()).is_err());
        assert!(wf.group::<f32>("ema", vit.layout()).is_err());
        let other = Vit::new(EncoderConfig::toy_teacher()).unwrap();
        assert!(wf.group::<f32>("student", other.layout()).is_err());
        assert!(WeightFile::from_bytes(b"nope\n{}\n", Path::new("x")).is_err());
    }
}
