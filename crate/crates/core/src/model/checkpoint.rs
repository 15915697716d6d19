//! Binary checkpoints: an 8-byte magic, a little-endian u64 header length, a
//! JSON header, then the tensors as little-endian f32.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Adam, AdamConfig, ModelConfig, ModelParameters};
use crate::error::{Error, Result};
use crate::tokenizer::Vocabulary;

const MAGIC: &[u8; 8] = b"RGFCKPT\0";
const FORMAT: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: ModelConfig,
    pub vocab: Vocabulary,
    /// Training steps completed.
    pub step: u64,
    pub params: ModelParameters<f32>,
    pub optimizer: Option<Adam<f32>>,
    /// Free-form run metadata (trainer settings, dataset hash).
    pub extra: serde_json::Value,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    /// Byte offset into the payload.
    offset: usize,
    len: usize,
}

#[derive(Serialize, Deserialize)]
struct OptimizerHeader {
    config: AdamConfig,
    step: u64,
}

#[derive(Serialize, Deserialize)]
struct Header {
    format: u32,
    model: ModelConfig,
    vocab: String,
    vocab_hash: String,
    step: u64,
    optimizer: Option<OptimizerHeader>,
    extra: serde_json::Value,
    tensors: Vec<TensorEntry>,
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

pub fn save_checkpoint(path: impl AsRef<Path>, ckpt: &Checkpoint) -> Result<()> {
    let path = path.as_ref();
    let shapes = ModelParameters::<f32>::shapes(&ckpt.model);
    let mut named: Vec<(String, Vec<usize>, &[f32])> = shapes
        .iter()
        .zip(ckpt.params.tensors())
        .map(|((name, shape), t)| (name.clone(), shape.clone(), t))
        .collect();
    if let Some(opt) = &ckpt.optimizer {
        for (prefix, state) in [("adam_m/", &opt.m), ("adam_v/", &opt.v)] {
            for ((name, shape), t) in shapes.iter().zip(state.tensors()) {
                named.push((format!("{prefix}{name}"), shape.clone(), t));
            }
        }
    }
    let mut offset = 0;
    let mut tensors = Vec::with_capacity(named.len());
    for (name, shape, t) in &named {
        if shape.iter().product::<usize>() != t.len() {
            return Err(bad(format!("tensor {name} has {} values for shape {shape:?}", t.len())));
        }
        tensors.push(TensorEntry { name: name.clone(), shape: shape.clone(), offset, len: t.len() });
        offset += t.len() * 4;
    }
    let header = Header {
        format: FORMAT,
        model: ckpt.model.clone(),
        vocab: ckpt.vocab.to_json(),
        vocab_hash: format!("{:016x}", ckpt.vocab.hash()),
        step: ckpt.step,
        optimizer: ckpt.optimizer.as_ref().map(|o| OptimizerHeader { config: o.config, step: o.step }),
        extra: ckpt.extra.clone(),
        tensors,
    };
    let header = serde_json::to_vec(&header)?;

    let mut buf = Vec::with_capacity(16 + header.len() + offset);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&(header.len() as u64).to_le_bytes());
    buf.extend_from_slice(&header);
    for (_, _, t) in &named {
        for x in t.iter() {
            buf.extend_from_slice(&x.to_le_bytes());
        }
    }
    let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&buf).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(bad("not a checkpoint file"));
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let payload_start = 16usize.checked_add(header_len).filter(|&e| e <= bytes.len()).ok_or_else(|| bad("truncated header"))?;
    let header: Header = serde_json::from_slice(&bytes[16..payload_start])?;
    if header.format != FORMAT {
        return Err(bad(format!("unsupported format {}", header.format)));
    }
    let vocab = Vocabulary::from_json(&header.vocab)?;
    if format!("{:016x}", vocab.hash()) != header.vocab_hash {
        return Err(bad("vocabulary hash mismatch"));
    }
    let payload = &bytes[payload_start..];
    let read = |entry: &TensorEntry| -> Result<Vec<f32>> {
        let end = entry.offset + entry.len * 4;
        let raw = payload.get(entry.offset..end).ok_or_else(|| bad(format!("tensor {} out of bounds", entry.name)))?;
        Ok(raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect())
    };
    let find = |name: &str| header.tensors.iter().find(|t| t.name == name);

    let shapes = ModelParameters::<f32>::shapes(&header.model);
    let fill = |prefix: &str| -> Result<ModelParameters<f32>> {
        let mut params = ModelParameters::zeros(&header.model);
        for ((name, shape), dst) in shapes.iter().zip(params.tensors_mut()) {
            let full = format!("{prefix}{name}");
            let entry = find(&full).ok_or_else(|| bad(format!("missing tensor {full}")))?;
            if &entry.shape != shape {
                return Err(bad(format!("tensor {full}: shape {:?}, expected {shape:?}", entry.shape)));
            }
            dst.copy_from_slice(&read(entry)?);
        }
        Ok(params)
    };
    let params = fill("")?;
    let optimizer = match &header.optimizer {
        Some(o) => Some(Adam { config: o.config, step: o.step, m: fill("adam_m/")?, v: fill("adam_v/")? }),
        None => None,
    };
    Ok(Checkpoint { model: header.model, vocab, step: header.step, params, optimizer, extra: header.extra })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tokenizer::{PropertySchema, Schema};

    fn sample() -> Checkpoint {
        let vocab = Vocabulary::new(Schema::new(vec![PropertySchema::new("y", 1, 2)]), ["a", "b"]).unwrap();
        let model =
            ModelConfig { n_layers: 1, d_e: 8, d_ff: 8, n_heads: 2, vocab_size: vocab.len(), ..Default::default() };
        let params = ModelParameters::init(&model, 5);
        let mut opt = Adam::new(AdamConfig::default(), &model);
        opt.step = 17;
        opt.m = ModelParameters::init(&model, 6);
        opt.v = ModelParameters::init(&model, 7);
        Checkpoint { model, vocab, step: 17, params, optimizer: Some(opt), extra: serde_json::json!({"note": 1}) }
    }

    #[test]
    fn round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let ck = sample();
        save_checkpoint(&path, &ck).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert_eq!(back, ck);
        let first = std::fs::read(&path).unwrap();
        save_checkpoint(&path, &back).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), first);
    }

    #[test]
    fn rejects_garbage() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.ckpt");
        std::fs::write(&path, b"hello world, not a checkpoint").unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::Checkpoint(_))));
        let ck = sample();
        save_checkpoint(&path, &ck).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes.truncate(bytes.len() - 3);
        std::fs::write(&path, bytes).unwrap();
        assert!(load_checkpoint(&path).is_err());
    }
}
