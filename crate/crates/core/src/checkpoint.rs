//! Binary checkpoints that restore a model bit for bit.
//!
//! Layout: the 8 magic bytes `P2LCKPT1`, a little-endian `u64` header
//! length, a JSON header, then every parameter's values as little-endian
//! `f64` in header order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::adapter::AdapterParams;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::p2l::{ClassifierBank, PromptPool};
use crate::tensor::Tensor;
use crate::vit::{EncoderParams, ModelConfig};

const MAGIC: &[u8; 8] = b"P2LCKPT1";

#[derive(Clone, Debug, Serialize, Deserialize)]
struct TensorMeta {
    name: String,
    shape: Vec<usize>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct ClassMeta {
    class_id: usize,
    stage_added: usize,
    prompt_frozen: bool,
    head_frozen: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    /// Last completed stage.
    stage: usize,
    encoder_frozen: bool,
    /// `Some(frozen)` when the model carries adapters.
    adapters: Option<bool>,
    classes: Vec<ClassMeta>,
    tensors: Vec<TensorMeta>,
}

pub fn encode(model: &Model, stage: usize) -> Vec<u8> {
    let mut tensors = Vec::new();
    let mut body = Vec::new();
    model.visit_params(&mut |name, shape, data| {
        tensors.push(TensorMeta {
            name: name.to_string(),
            shape: shape.to_vec(),
        });
        for v in data {
            body.extend_from_slice(&v.to_le_bytes());
        }
    });
    let classes = model
        .pool
        .entries()
        .iter()
        .zip(model.bank.entries())
        .map(|(p, h)| ClassMeta {
            class_id: p.class_id,
            stage_added: p.stage_added,
            prompt_frozen: p.frozen,
            head_frozen: h.frozen,
        })
        .collect();
    let header = Header {
        config: model.config.clone(),
        stage,
        encoder_frozen: model.encoder.frozen,
        adapters: model.adapters.as_ref().map(|a| a.frozen),
        classes,
        tensors,
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::with_capacity(16 + json.len() + body.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&body);
    out
}

/// Returns the model and the stage it was saved after.
pub fn decode(bytes: &[u8]) -> Result<(Model, usize)> {
    let bad = |m: &str| Error::Checkpoint(m.to_string());
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(bad("not a checkpoint (bad magic)"));
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let body_start = 16usize
        .checked_add(hlen)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| bad("truncated header"))?;
    let header: Header = serde_json::from_slice(&bytes[16..body_start])?;
    header.config.validate()?;

    let mut encoder = EncoderParams::init(&header.config)?;
    encoder.frozen = header.encoder_frozen;
    let adapters = match header.adapters {
        Some(frozen) => Some(AdapterParams {
            frozen,
            ..crate::adapter::attach_adapters(&header.config)?
        }),
        None => None,
    };
    let mut model = Model {
        pool: PromptPool::new(header.config.dim),
        bank: ClassifierBank::new(header.config.dim),
        config: header.config.clone(),
        encoder,
        adapters,
    };
    for c in &header.classes {
        model.add_classes(
            &[c.class_id],
            c.stage_added,
            &crate::p2l::PromptInit::Random { seed: 0 },
        )?;
    }
    for c in &header.classes {
        let i = model.pool.position(c.class_id).expect("just added");
        model.pool.entries_mut()[i].frozen = c.prompt_frozen;
        model.bank.entries_mut()[i].frozen = c.head_frozen;
    }

    let expected: Vec<(String, Vec<usize>)> = {
        let mut v = Vec::new();
        model.visit_params(&mut |n, s, _| v.push((n.to_string(), s.to_vec())));
        v
    };
    let listed: Vec<(String, Vec<usize>)> =
        header.tensors.iter().map(|t| (t.name.clone(), t.shape.clone())).collect();
    if expected != listed {
        return Err(bad("tensor table does not match the model layout"));
    }
    let total: usize = listed.iter().map(|(_, s)| s.iter().product::<usize>()).sum();
    let body = &bytes[body_start..];
    if body.len() != total * 8 {
        return Err(Error::Checkpoint(format!(
            "expected {} value bytes, found {}",
            total * 8,
            body.len()
        )));
    }
    let mut values = body
        .chunks_exact(8)
        .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")));
    model.visit_params_mut(&mut |_, data| {
        for d in data.iter_mut() {
            *d = values.next().expect("length checked");
        }
    });
    Ok((model, header.stage))
}

pub fn save(model: &Model, stage: usize, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode(model, stage)).map_err(|e| Error::io(path, e))
}

pub fn load(path: impl AsRef<Path>) -> Result<(Model, usize)> {
    let path = path.as_ref();
    decode(&fs::read(path).map_err(|e| Error::io(path, e))?)
}

/// Encoder-only checkpoint, used for pretrained backbones.
pub fn save_backbone(encoder: &EncoderParams, config: &ModelConfig, path: impl AsRef<Path>) -> Result<()> {
    let model = Model {
        config: config.clone(),
        encoder: encoder.clone(),
        adapters: None,
        pool: PromptPool::new(config.dim),
        bank: ClassifierBank::new(config.dim),
    };
    save(&model, 0, path)
}

pub fn load_backbone(path: impl AsRef<Path>) -> Result<(EncoderParams, ModelConfig)> {
    let (m, _) = load(path)?;
    Ok((m.encoder, m.config))
}

/// Flat tensor view of one named parameter, mostly for inspection.
pub fn param(model: &Model, name: &str) -> Option<Tensor> {
    let mut found = None;
    model.visit_params(&mut |n, s, d| {
        if n == name {
            found = Some(Tensor::new(s.to_vec(), d.to_vec()).expect("consistent"));
        }
    });
    found
}
