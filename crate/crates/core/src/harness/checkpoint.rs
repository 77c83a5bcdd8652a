//! Binary checkpoints.
//!
//! Layout: `b"LDPC"`, format version (u32 LE), metadata length (u64 LE),
//! JSON metadata, then the f32 LE payload of every tensor in metadata order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::harness::config::RunConfig;
use crate::harness::model::Model;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"LDPC";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the payload that follows the metadata.
    pub offset: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metadata {
    pub tensors: Vec<TensorEntry>,
    pub betas: Vec<f64>,
    pub final_bits: Vec<u32>,
    pub config: RunConfig,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub model: Model,
    pub final_bits: Vec<u32>,
}

fn named_tensors(model: &Model) -> Vec<(String, Tensor)> {
    let mut out: Vec<(String, Tensor)> = model
        .params
        .iter()
        .map(|p| (p.name.clone(), p.value.clone()))
        .collect();
    for (name, s) in model.bn_names.iter().zip(&model.bn_states) {
        let c = s.running_mean.len();
        out.push((
            format!("{name}.running_mean"),
            Tensor::new(vec![c], s.running_mean.clone()).expect("1-D"),
        ));
        out.push((
            format!("{name}.running_var"),
            Tensor::new(vec![c], s.running_var.clone()).expect("1-D"),
        ));
    }
    out
}

pub fn to_bytes(ckpt: &Checkpoint) -> Result<Vec<u8>> {
    let tensors = named_tensors(&ckpt.model);
    let mut entries = Vec::with_capacity(tensors.len());
    let mut payload = Vec::new();
    for (name, t) in &tensors {
        entries.push(TensorEntry {
            name: name.clone(),
            shape: t.shape().to_vec(),
            offset: payload.len() as u64,
        });
        for v in t.data() {
            payload.extend(v.to_le_bytes());
        }
    }
    let meta = Metadata {
        tensors: entries,
        betas: ckpt.model.precisions.iter().map(|p| p.beta).collect(),
        final_bits: ckpt.final_bits.clone(),
        config: ckpt.config.clone(),
    };
    let json = serde_json::to_vec(&meta)?;
    let mut out = Vec::with_capacity(16 + json.len() + payload.len());
    out.extend(MAGIC);
    out.extend(VERSION.to_le_bytes());
    out.extend((json.len() as u64).to_le_bytes());
    out.extend(json);
    out.extend(payload);
    Ok(out)
}

pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
    let err = |m: String| Error::Checkpoint(m);
    if bytes.len() < 16 || &bytes[..4] != MAGIC {
        return Err(err("not a checkpoint (bad magic)".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(err(format!("unsupported version {version}")));
    }
    let meta_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let meta_end = 16usize
        .checked_add(meta_len)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| err("truncated metadata".into()))?;
    let meta: Metadata = serde_json::from_slice(&bytes[16..meta_end])?;
    let payload = &bytes[meta_end..];

    meta.config.validate()?;
    let mut model = Model::build(
        &meta.config.model,
        meta.config.train.seed,
        meta.config.precision.lr,
        None,
    )?;
    let expected = named_tensors(&model);
    if expected.len() != meta.tensors.len() {
        return Err(err(format!(
            "{} tensors stored, model has {}",
            meta.tensors.len(),
            expected.len()
        )));
    }
    let mut values = Vec::with_capacity(expected.len());
    for ((name, t), entry) in expected.iter().zip(&meta.tensors) {
        if &entry.name != name || entry.shape != t.shape() {
            return Err(err(format!(
                "tensor `{}` {:?} does not match model tensor `{name}` {:?}",
                entry.name,
                entry.shape,
                t.shape()
            )));
        }
        let start = entry.offset as usize;
        let end = start + 4 * t.numel();
        let raw = payload
            .get(start..end)
            .ok_or_else(|| err(format!("payload of `{name}` is truncated")))?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        values.push(Tensor::new(entry.shape.clone(), data)?);
    }
    let mut values = values.into_iter();
    for p in model.params.iter_mut() {
        p.value = values.next().expect("counted");
    }
    for s in model.bn_states.iter_mut() {
        s.running_mean = values.next().expect("counted").into_data();
        s.running_var = values.next().expect("counted").into_data();
    }
    if meta.betas.len() != model.precisions.len() || meta.final_bits.len() != model.precisions.len()
    {
        return Err(err(format!(
            "{} betas and {} final bits for {} quantized layers",
            meta.betas.len(),
            meta.final_bits.len(),
            model.precisions.len()
        )));
    }
    for (p, &b) in model.precisions.iter_mut().zip(&meta.betas) {
        p.beta = b;
    }
    Ok(Checkpoint {
        config: meta.config,
        model,
        final_bits: meta.final_bits,
    })
}

pub fn save(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    fs::write(path, to_bytes(ckpt)?)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    from_bytes(&fs::read(path)?)
}
