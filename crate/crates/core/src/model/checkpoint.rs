//! Binary checkpoint: magic, format version, JSON header, raw tensors, digest.
//!
//! ```text
//! "SRGCKPT\0" | u32 version | u64 header_len | header JSON | f32 LE data | sha256
//! ```
//! The digest covers every byte before it.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{Generator, GeneratorConfig, Model};
use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::synthdata::{ParamDef, ParameterSpec};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"SRGCKPT\0";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingMetadata {
    pub epochs: usize,
    pub steps: u64,
    pub seed: u64,
    pub final_loss: Option<f64>,
    /// Identifies the perceptual feature extractor used while training.
    pub perceptual: Option<String>,
    pub loss_weights: Option<LossWeights>,
    pub dataset: Option<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub metadata: TrainingMetadata,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
    len: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: GeneratorConfig,
    spec: ParameterSpec,
    /// Per-parameter affine normalization, sim then vis.
    normalization: Vec<ParamDef>,
    metadata: TrainingMetadata,
    tensors: Vec<TensorEntry>,
}

const DIGEST_LEN: usize = 32;

impl Checkpoint {
    pub fn new(model: Model, metadata: TrainingMetadata) -> Self {
        Self { model, metadata }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let gen = &self.model.generator;
        let mut tensors = Vec::new();
        let mut offset = 0;
        for (name, shape, data) in gen.named_tensors() {
            tensors.push(TensorEntry { name, shape, offset, len: data.len() });
            offset += data.len();
        }
        let header = Header {
            config: gen.config.clone(),
            spec: self.model.spec.clone(),
            normalization: self.model.spec.all().cloned().collect(),
            metadata: self.metadata.clone(),
            tensors,
        };
        let header = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(20 + header.len() + offset * 4 + DIGEST_LEN);
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for t in gen.tensors() {
            for v in t {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 20 + DIGEST_LEN || &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(Error::Corrupt("not a checkpoint file (bad magic)".into()));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != CHECKPOINT_VERSION {
            return Err(Error::IncompatibleVersion { found: version, expected: CHECKPOINT_VERSION });
        }
        let (body, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
        if Sha256::digest(body).as_slice() != digest {
            return Err(Error::Corrupt("checksum mismatch (truncated or modified)".into()));
        }
        let header_len = u64::from_le_bytes(body[12..20].try_into().unwrap()) as usize;
        let data_start = 20usize
            .checked_add(header_len)
            .filter(|&e| e <= body.len())
            .ok_or_else(|| Error::Corrupt("header length exceeds file size".into()))?;
        let header: Header = serde_json::from_slice(&body[20..data_start])
            .map_err(|e| Error::Corrupt(format!("header: {e}")))?;
        let raw = &body[data_start..];
        if raw.len() % 4 != 0 {
            return Err(Error::Corrupt("tensor section is not a whole number of f32".into()));
        }
        let values: Vec<f32> = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();

        header.config.validate().map_err(|e| Error::Corrupt(e.to_string()))?;
        header.spec.validate().map_err(|e| Error::Corrupt(e.to_string()))?;
        let mut gen: Generator<f32> = Generator::init(&header.config, 0)?;
        let expected: Vec<(String, Vec<usize>)> = gen
            .named_tensors()
            .into_iter()
            .map(|(n, s, _)| (n, s))
            .collect();
        if expected.len() != header.tensors.len() {
            return Err(Error::Corrupt(format!(
                "{} tensors stored, configuration needs {}",
                header.tensors.len(),
                expected.len()
            )));
        }
        for ((name, shape), (entry, dst)) in expected.iter().zip(header.tensors.iter().zip(gen.tensors_mut())) {
            if &entry.name != name || &entry.shape != shape || entry.len != dst.len() {
                return Err(Error::Corrupt(format!("tensor `{}` does not match `{name}` {shape:?}", entry.name)));
            }
            let src = values
                .get(entry.offset..entry.offset + entry.len)
                .ok_or_else(|| Error::Corrupt(format!("tensor `{name}` extends past the data section")))?;
            dst.copy_from_slice(src);
        }
        let model = Model::from_parts(header.spec, gen).map_err(|e| Error::Corrupt(e.to_string()))?;
        Ok(Self { model, metadata: header.metadata })
    }

    /// Hex SHA-256 of the serialized checkpoint.
    pub fn digest_hex(&self) -> Result<String> {
        let bytes = self.to_bytes()?;
        Ok(format!("{:x}", Sha256::digest(&bytes)))
    }

    /// Writes atomically through a sibling temp file.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}
