//! Binary checkpoints: `CEK1`, a little-endian u32 header length, a JSON
//! header (config, tensor manifest, vocabulary checksum), then every tensor
//! as little-endian f32 in manifest order.

use std::collections::BTreeMap;

use ndarray::{ArrayD, IxDyn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::{Model, ModelConfig, ModelParams, Parameters};
use crate::error::{Error, Result};
use crate::train::PretrainHeads;

pub const MAGIC: &[u8; 4] = b"CEK1";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub config: ModelConfig,
    pub tensors: Vec<TensorEntry>,
    pub vocab_checksum: String,
    #[serde(default)]
    pub metadata: BTreeMap<String, String>,
}

/// A decoded checkpoint; tensors are widened back to f64.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub header: Header,
    pub tensors: Vec<(String, ArrayD<f64>)>,
}

/// Serializes a model, optionally with pre-training heads appended.
pub fn to_bytes(
    model: &Model,
    heads: Option<&PretrainHeads>,
    vocab_checksum: &str,
    metadata: BTreeMap<String, String>,
) -> Result<Vec<u8>> {
    model.params.check_shapes(&model.config)?;
    let mut views = model.params.tensors();
    if let Some(h) = heads {
        views.extend(h.tensors().into_iter().map(|(n, t)| (format!("pretrain.{n}"), t)));
    }
    let header = Header {
        config: model.config,
        tensors: views.iter().map(|(n, t)| TensorEntry { name: n.clone(), shape: t.shape().to_vec() }).collect(),
        vocab_checksum: vocab_checksum.to_string(),
        metadata,
    };
    let json = serde_json::to_vec(&header).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let n_values: usize = views.iter().map(|(_, t)| t.len()).sum();
    let mut out = Vec::with_capacity(8 + json.len() + 4 * n_values);
    out.extend_from_slice(MAGIC);
    let len = u32::try_from(json.len()).map_err(|_| Error::Checkpoint("header too large".into()))?;
    out.extend_from_slice(&len.to_le_bytes());
    out.extend_from_slice(&json);
    for (_, t) in &views {
        for &v in t.iter() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    Ok(out)
}

pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
    let bad = |m: &str| Error::Checkpoint(m.to_string());
    if bytes.len() < 8 || &bytes[..4] != MAGIC {
        return Err(bad("missing CEK1 magic"));
    }
    let len = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes")) as usize;
    let body = bytes.get(8..8 + len).ok_or_else(|| bad("truncated header"))?;
    let header: Header = serde_json::from_slice(body).map_err(|e| Error::Checkpoint(format!("header: {e}")))?;
    let mut offset = 8 + len;
    let mut tensors = Vec::with_capacity(header.tensors.len());
    for entry in &header.tensors {
        let n: usize = entry.shape.iter().product();
        let raw = bytes.get(offset..offset + 4 * n).ok_or_else(|| bad(&format!("truncated data for {}", entry.name)))?;
        let values: Vec<f64> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect();
        let arr = ArrayD::from_shape_vec(IxDyn(&entry.shape), values).map_err(|e| bad(&e.to_string()))?;
        tensors.push((entry.name.clone(), arr));
        offset += 4 * n;
    }
    if offset != bytes.len() {
        return Err(bad(&format!("{} trailing bytes", bytes.len() - offset)));
    }
    Ok(Checkpoint { header, tensors })
}

fn load_into<P: Parameters>(target: &mut P, source: &BTreeMap<&str, &ArrayD<f64>>, prefix: &str) -> Result<()> {
    for (name, mut t) in target.tensors_mut() {
        let key = format!("{prefix}{name}");
        let src = source.get(key.as_str()).ok_or_else(|| Error::Checkpoint(format!("missing tensor {key}")))?;
        if src.shape() != t.shape() {
            return Err(Error::Checkpoint(format!("{key}: shape {:?}, expected {:?}", src.shape(), t.shape())));
        }
        t.assign(src);
    }
    Ok(())
}

impl Checkpoint {
    fn by_name(&self) -> BTreeMap<&str, &ArrayD<f64>> {
        self.tensors.iter().map(|(n, t)| (n.as_str(), t)).collect()
    }

    pub fn model(&self) -> Result<Model> {
        let config = self.header.config;
        config.validate()?;
        let mut params = ModelParams::init_with_std(&config, 0.0, &mut ChaCha8Rng::seed_from_u64(0));
        load_into(&mut params, &self.by_name(), "")?;
        Ok(Model { config, params })
    }

    pub fn heads(&self) -> Result<Option<PretrainHeads>> {
        let names = self.by_name();
        if !names.contains_key("pretrain.mlm_bias") {
            return Ok(None);
        }
        let c = &self.header.config;
        let mut heads = PretrainHeads::init(c.vocab_size, c.d_model, &mut ChaCha8Rng::seed_from_u64(0));
        load_into(&mut heads, &names, "pretrain.")?;
        Ok(Some(heads))
    }

    /// Errors unless the checkpoint was written with this vocabulary.
    pub fn check_vocab(&self, checksum: &str) -> Result<()> {
        if self.header.vocab_checksum != checksum {
            return Err(Error::Checkpoint(format!(
                "vocabulary checksum {} does not match checkpoint {}",
                checksum, self.header.vocab_checksum
            )));
        }
        Ok(())
    }
}
