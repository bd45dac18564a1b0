//! Named-tensor checkpoints and their on-disk format.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "BTXF" | version: u32 | header_len: u64 | header: UTF-8 JSON {"config", "metadata"}
//! then, name-sorted, per tensor:
//!   name_len: u32 | name | dtype: u8 (0 = f32, 1 = f64) | rank: u32 | extents: u64 × rank | data
//! ```

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{ModelConfig, ModelError};
use crate::tensor::{DType, Element, Tensor};

pub const MAGIC: &[u8; 4] = b"BTXF";
pub const FORMAT_VERSION: u32 = 1;
pub const INIT_STD: f64 = 0.02;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<T> {
    pub config: ModelConfig,
    pub tensors: BTreeMap<String, Tensor<T>>,
    /// Provenance, e.g. `branch:latin` or `merged:btx-3x`.
    pub metadata: String,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    metadata: String,
}

impl<T: Element> Checkpoint<T> {
    pub fn new(
        config: ModelConfig,
        tensors: BTreeMap<String, Tensor<T>>,
        metadata: impl Into<String>,
    ) -> Result<Self, ModelError> {
        let ckpt = Self {
            config,
            tensors,
            metadata: metadata.into(),
        };
        ckpt.validate()?;
        Ok(ckpt)
    }

    /// Every canonical tensor present with its exact shape, and nothing else.
    pub fn validate(&self) -> Result<(), ModelError> {
        self.config.validate()?;
        let expected = self.config.parameter_shapes();
        for (name, shape) in &expected {
            match self.tensors.get(name) {
                None => return Err(ModelError::MissingTensor(name.clone())),
                Some(t) if t.shape() != shape.as_slice() => {
                    return Err(ModelError::WrongShape {
                        name: name.clone(),
                        expected: shape.clone(),
                        found: t.shape().to_vec(),
                    })
                }
                Some(_) => {}
            }
        }
        if self.tensors.len() != expected.len() {
            let known: std::collections::HashSet<&String> = expected.iter().map(|(n, _)| n).collect();
            if let Some(extra) = self.tensors.keys().find(|n| !known.contains(n)) {
                return Err(ModelError::UnexpectedTensor(extra.clone()));
            }
        }
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>, ModelError> {
        self.tensors
            .get(name)
            .ok_or_else(|| ModelError::MissingTensor(name.to_string()))
    }

    pub fn cast<U: Element>(&self) -> Checkpoint<U> {
        Checkpoint {
            config: self.config.clone(),
            tensors: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), v.cast()))
                .collect(),
            metadata: self.metadata.clone(),
        }
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors.values().map(|t| t.numel()).sum()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = Header {
            config: self.config.clone(),
            metadata: self.metadata.clone(),
        };
        encode_container(MAGIC, &header, &self.tensors)
    }

    /// Parses a checkpoint, converting stored scalars to `T` if needed.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self, ModelError> {
        let (header, tensors): (Header, _) = decode_container(MAGIC, bytes)?;
        Self::new(header.config, tensors, header.metadata)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), ModelError> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ModelError> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    /// Hex SHA-256 of the serialized checkpoint.
    pub fn content_hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_bytes()))
    }
}

/// `magic | version | header_len | JSON header | tensor records`, shared by
/// checkpoints and adapter files.
pub(crate) fn encode_container<H: Serialize, T: Element>(
    magic: &[u8; 4],
    header: &H,
    tensors: &BTreeMap<String, Tensor<T>>,
) -> Vec<u8> {
    let header = serde_json::to_vec(header).expect("header serializes");
    let numel: usize = tensors.values().map(Tensor::numel).sum();
    let mut out = Vec::with_capacity(16 + header.len() + numel * T::DTYPE.size());
    out.extend_from_slice(magic);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    for (name, t) in tensors {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(T::DTYPE.tag());
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &e in t.shape() {
            out.extend_from_slice(&(e as u64).to_le_bytes());
        }
        for &v in t.data() {
            v.write_le(&mut out);
        }
    }
    out
}

pub(crate) fn decode_container<H: DeserializeOwned, T: Element>(
    magic: &[u8; 4],
    bytes: &[u8],
) -> Result<(H, BTreeMap<String, Tensor<T>>), ModelError> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != magic {
        return Err(ModelError::Format("bad magic".into()));
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(ModelError::Format(format!("unsupported version {version}")));
    }
    let header_len = r.u64()? as usize;
    let header: H = serde_json::from_slice(r.take(header_len)?)
        .map_err(|e| ModelError::Format(format!("header: {e}")))?;
    let mut tensors = BTreeMap::new();
    while r.pos < bytes.len() {
        let name_len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| ModelError::Format("tensor name is not UTF-8".into()))?
            .to_string();
        let dtype = DType::from_tag(r.take(1)?[0])
            .ok_or_else(|| ModelError::Format(format!("{name}: unknown dtype")))?;
        let rank = r.u32()? as usize;
        let shape = (0..rank)
            .map(|_| r.u64().map(|v| v as usize))
            .collect::<Result<Vec<_>, _>>()?;
        let numel = shape
            .iter()
            .try_fold(1usize, |acc, &e| acc.checked_mul(e))
            .ok_or_else(|| ModelError::Format(format!("{name}: extents overflow")))?;
        let raw = r.take(numel.saturating_mul(dtype.size()))?;
        let data: Vec<T> = match dtype {
            DType::F32 => raw
                .chunks_exact(4)
                .map(|c| T::from_f64_lossy(f32::read_le(c) as f64))
                .collect(),
            DType::F64 => raw
                .chunks_exact(8)
                .map(|c| T::from_f64_lossy(f64::read_le(c)))
                .collect(),
        };
        if tensors.insert(name.clone(), Tensor::new(shape, data)?).is_some() {
            return Err(ModelError::Format(format!("duplicate tensor {name}")));
        }
    }
    Ok((header, tensors))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], ModelError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| ModelError::Format("truncated checkpoint".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, ModelError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, ModelError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

fn is_output_projection(name: &str) -> bool {
    name.ends_with(".attn.o") || name.ends_with(".down")
}

/// Deterministic initialization: N(0, 0.02) weights, residual output
/// projections scaled by `1/sqrt(2·n_layers)`, unit norm gains. Values are
/// drawn in `f64` so different precisions of the same seed agree up to rounding.
pub fn init_model<T: Element>(config: &ModelConfig, seed: u64) -> Result<Checkpoint<T>, ModelError> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, INIT_STD).expect("valid std");
    let out_scale = 1.0 / (2.0 * config.n_layers as f64).sqrt();
    let mut tensors = BTreeMap::new();
    for (name, shape) in config.parameter_shapes() {
        let t = if name.ends_with(".gain") {
            Tensor::ones(&shape)
        } else {
            let scale = if is_output_projection(&name) { out_scale } else { 1.0 };
            Tensor::from_fn(&shape, |_| T::from_f64_lossy(normal.sample(&mut rng) * scale))
        };
        tensors.insert(name, t);
    }
    Checkpoint::new(config.clone(), tensors, format!("init:seed={seed}"))
}
