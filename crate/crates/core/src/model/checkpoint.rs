//! Versioned binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic "SMCK" | version u32 | header_len u32 | header (TOML, UTF-8)
//! tensor_count u32
//! repeated: name_len u16 | name | ndims u8 | dims u32 × ndims | f32 × Π dims
//! ```

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::config::ModelConfig;
use super::dit::DiffusionTransformer;
use crate::error::{Error, Result};
use crate::lora::SiteSelection;
use crate::seed::mix64;

pub const MAGIC: &[u8; 4] = b"SMCK";
pub const VERSION: u32 = 1;
const MAX_HEADER: usize = 1 << 20;
const MAX_NAME: usize = 256;
const MAX_DIMS: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdapterMeta {
    pub experts: usize,
    pub rank: usize,
    pub gamma: f64,
    pub selection: SiteSelection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointHeader {
    pub model: ModelConfig,
    #[serde(default)]
    pub train_backbone_attention: bool,
    pub adapters: Option<AdapterMeta>,
}

impl CheckpointHeader {
    pub fn of(model: &DiffusionTransformer) -> Self {
        Self {
            model: model.config.clone(),
            train_backbone_attention: model.train_backbone_attention,
            adapters: model.adapters.as_ref().map(|a| AdapterMeta {
                experts: a.num_experts(),
                rank: a.rank,
                gamma: a.gamma,
                selection: a.selection.clone(),
            }),
        }
    }
}

pub fn encode_checkpoint(model: &DiffusionTransformer) -> Result<Vec<u8>> {
    let header = toml::to_string(&CheckpointHeader::of(model))
        .map_err(|e| Error::Checkpoint(format!("header encoding: {e}")))?;
    let params = model.named_params();
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(header.as_bytes());
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (name, t) in params {
        if name.len() > MAX_NAME || t.ndim() > MAX_DIMS {
            return Err(Error::Checkpoint(format!("tensor {name} not encodable")));
        }
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(t.ndim() as u8);
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in t.iter() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Checkpoint(format!("truncated {what}")))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }
}

/// A decoded tensor: name, shape, values.
pub type RawTensor = (String, Vec<usize>, Vec<f32>);

/// Parses the container without building a model.
pub fn decode_raw(bytes: &[u8]) -> Result<(CheckpointHeader, Vec<RawTensor>)> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let hlen = r.u32("header length")? as usize;
    if hlen > MAX_HEADER {
        return Err(Error::Checkpoint(format!("header of {hlen} bytes exceeds limit")));
    }
    let htext = std::str::from_utf8(r.take(hlen, "header")?)
        .map_err(|_| Error::Checkpoint("header is not UTF-8".into()))?;
    let header: CheckpointHeader =
        toml::from_str(htext).map_err(|e| Error::Checkpoint(format!("header: {e}")))?;
    let count = r.u32("tensor count")? as usize;
    // Every tensor record needs at least 3 bytes.
    if count > r.remaining() / 3 {
        return Err(Error::Checkpoint(format!("tensor count {count} exceeds file size")));
    }
    let mut tensors = Vec::with_capacity(count);
    for _ in 0..count {
        let nlen = u16::from_le_bytes(r.take(2, "name length")?.try_into().expect("2 bytes")) as usize;
        if nlen > MAX_NAME {
            return Err(Error::Checkpoint(format!("tensor name of {nlen} bytes")));
        }
        let name = std::str::from_utf8(r.take(nlen, "tensor name")?)
            .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?
            .to_string();
        let ndims = r.take(1, "rank")?[0] as usize;
        if ndims > MAX_DIMS {
            return Err(Error::Checkpoint(format!("tensor {name} has {ndims} dims")));
        }
        let mut dims = Vec::with_capacity(ndims);
        let mut len: usize = 1;
        for _ in 0..ndims {
            let d = r.u32("dimension")? as usize;
            len = len
                .checked_mul(d)
                .filter(|&l| l <= r.remaining() / 4)
                .ok_or_else(|| Error::Checkpoint(format!("tensor {name} larger than file")))?;
            dims.push(d);
        }
        let raw = r.take(len * 4, "tensor data")?;
        let values = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        tensors.push((name, dims, values));
    }
    if r.remaining() != 0 {
        return Err(Error::Checkpoint(format!("{} trailing bytes", r.remaining())));
    }
    Ok((header, tensors))
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<DiffusionTransformer> {
    let (header, tensors) = decode_raw(bytes)?;
    let mut model = DiffusionTransformer::new(header.model)?;
    model.train_backbone_attention = header.train_backbone_attention;
    if let Some(meta) = header.adapters {
        model
            .attach_experts(meta.experts, meta.rank, meta.gamma, meta.selection, 0)
            .map_err(|e| Error::Checkpoint(format!("adapter metadata: {e}")))?;
    }
    let mut by_name: BTreeMap<String, (Vec<usize>, Vec<f32>)> = BTreeMap::new();
    for (name, dims, values) in tensors {
        if by_name.insert(name.clone(), (dims, values)).is_some() {
            return Err(Error::Checkpoint(format!("duplicate tensor {name}")));
        }
    }
    let mut params = model.named_params_mut();
    if params.len() != by_name.len() {
        return Err(Error::Checkpoint(format!(
            "expected {} tensors, found {}",
            params.len(),
            by_name.len()
        )));
    }
    for (name, view) in &mut params {
        let (dims, values) = by_name
            .get(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))?;
        if view.shape() != dims.as_slice() {
            return Err(Error::Checkpoint(format!(
                "tensor {name} has shape {dims:?}, expected {:?}",
                view.shape()
            )));
        }
        for (dst, &src) in view.iter_mut().zip(values) {
            if !src.is_finite() {
                return Err(Error::Checkpoint(format!("non-finite value in {name}")));
            }
            *dst = src as f64;
        }
    }
    drop(params);
    Ok(model)
}

/// One `name<TAB>d0xd1` line per tensor, in checkpoint order.
pub fn tensor_manifest(model: &DiffusionTransformer) -> String {
    let mut s = String::new();
    for (name, t) in model.named_params() {
        let dims: Vec<String> = t.shape().iter().map(|d| d.to_string()).collect();
        s.push_str(&format!("{name}\t{}\n", dims.join("x")));
    }
    s
}

pub fn manifest_path(path: &Path) -> PathBuf {
    let mut p = path.as_os_str().to_owned();
    p.push(".manifest");
    PathBuf::from(p)
}

/// Writes the checkpoint and its `.manifest` sidecar.
pub fn save_checkpoint(model: &DiffusionTransformer, path: &Path) -> Result<()> {
    let bytes = encode_checkpoint(model)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))?;
    let mp = manifest_path(path);
    std::fs::write(&mp, tensor_manifest(model)).map_err(|e| Error::io(&mp, e))
}

pub fn load_checkpoint(path: &Path) -> Result<DiffusionTransformer> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}

/// Order-sensitive 64-bit digest of a tensor's exact bit patterns.
pub fn tensor_hash<'a>(values: impl IntoIterator<Item = &'a f64>) -> u64 {
    values
        .into_iter()
        .fold(mix64(0x5eed), |h, v| mix64(h ^ v.to_bits()))
}

/// Digest of every named parameter tensor.
pub fn param_hashes(model: &DiffusionTransformer) -> BTreeMap<String, u64> {
    model
        .named_params()
        .into_iter()
        .map(|(n, t)| (n, tensor_hash(t.iter())))
        .collect()
}
