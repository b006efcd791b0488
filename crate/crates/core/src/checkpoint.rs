//! Self-describing model file.
//!
//! Layout: the 8-byte magic `PROTOKD\0`, a little-endian `u32` format
//! version, a little-endian `u32` header length, a JSON header, then every
//! tensor's values as little-endian `f32` in header order. Saving the same
//! model twice produces identical bytes.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::Modality;
use crate::encoder::{Encoder, EncoderConfig, StudentHead};
use crate::error::{Error, Result};
use crate::losses::{Distance, PrototypeSet};
use crate::rng::Rng;
use crate::tensor::Tensor;
use crate::trainer::{Method, TrainConfig, TrainedModel};

pub const MAGIC: &[u8; 8] = b"PROTOKD\0";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Offset into the value blob, in elements.
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Header {
    pub method: Method,
    pub distance: Distance,
    pub modality: Modality,
    pub class_names: Vec<String>,
    pub encoder: EncoderConfig,
    /// Training settings that produced the weights, when known.
    pub train: Option<TrainConfig>,
    pub best_epoch: Option<usize>,
    pub tensors: Vec<TensorEntry>,
    /// Row `i` of the `prototypes` tensor belongs to `prototype_classes[i]`.
    pub prototype_classes: Vec<usize>,
}

const PROTOTYPES: &str = "prototypes";

fn named_tensors(model: &TrainedModel) -> Vec<(&str, &Tensor<f32>)> {
    model
        .encoder
        .params()
        .iter()
        .chain(model.head.params().iter())
        .map(|p| (p.name.as_str(), &p.value))
        .chain(std::iter::once((PROTOTYPES, &model.prototypes.prototypes)))
        .collect()
}

pub fn write_checkpoint(
    model: &TrainedModel,
    train: Option<&TrainConfig>,
    best_epoch: Option<usize>,
    mut out: impl Write,
) -> Result<()> {
    let tensors = named_tensors(model);
    let mut offset = 0;
    let entries = tensors
        .iter()
        .map(|(name, t)| {
            let e = TensorEntry {
                name: name.to_string(),
                shape: t.shape().to_vec(),
                offset,
            };
            offset += t.numel();
            e
        })
        .collect();
    let header = Header {
        method: model.method,
        distance: model.distance,
        modality: model.modality,
        class_names: model.class_names.clone(),
        encoder: model.encoder.config().clone(),
        train: train.cloned(),
        best_epoch,
        tensors: entries,
        prototype_classes: model.prototypes.class_ids.clone(),
    };
    let json = serde_json::to_vec(&header)?;
    let mut buf = Vec::with_capacity(16 + json.len() + offset * 4);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(json.len() as u32).to_le_bytes());
    buf.extend_from_slice(&json);
    for (_, t) in &tensors {
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    out.write_all(&buf)?;
    Ok(())
}

pub fn read_checkpoint(mut input: impl Read) -> Result<(TrainedModel, Header)> {
    let mut fixed = [0u8; 16];
    input
        .read_exact(&mut fixed)
        .map_err(|_| Error::Checkpoint("file too short".into()))?;
    if &fixed[..8] != MAGIC {
        return Err(Error::Checkpoint("bad magic; not a model file".into()));
    }
    let version = u32::from_le_bytes(fixed[8..12].try_into().unwrap());
    if version != VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported format version {version}"
        )));
    }
    let mut json = vec![0u8; u32::from_le_bytes(fixed[12..16].try_into().unwrap()) as usize];
    input
        .read_exact(&mut json)
        .map_err(|_| Error::Checkpoint("truncated header".into()))?;
    let header: Header = serde_json::from_slice(&json)?;
    let mut blob = Vec::new();
    input.read_to_end(&mut blob)?;
    if blob.len() % 4 != 0 {
        return Err(Error::Checkpoint(
            "value blob is not a whole number of f32s".into(),
        ));
    }
    let values: Vec<f32> = blob
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let mut named = Vec::with_capacity(header.tensors.len());
    for e in &header.tensors {
        let n: usize = e.shape.iter().product();
        let data = values.get(e.offset..e.offset + n).ok_or_else(|| {
            Error::Checkpoint(format!("tensor {} runs past the end of the file", e.name))
        })?;
        named.push((e.name.clone(), Tensor::new(&e.shape, data.to_vec())?));
    }
    let expected: usize = header
        .tensors
        .iter()
        .map(|e| e.shape.iter().product::<usize>())
        .sum();
    if expected != values.len() {
        return Err(Error::Checkpoint(format!(
            "header describes {expected} values but the file holds {}",
            values.len()
        )));
    }
    let (protos, rest) = match named.split_last() {
        Some(((name, t), rest)) if name == PROTOTYPES => (t.clone(), rest),
        _ => return Err(Error::Checkpoint("missing prototype table".into())),
    };
    let mut encoder = Encoder::new(header.encoder.clone(), &mut Rng::new(0))?;
    let n_enc = encoder.params().len();
    if rest.len() != n_enc + 2 {
        return Err(Error::Checkpoint(format!(
            "expected {} parameter tensors, found {}",
            n_enc + 2,
            rest.len()
        )));
    }
    encoder.params_mut().load_from(&rest[..n_enc])?;
    let head = StudentHead::from_parts(rest[n_enc].1.clone(), rest[n_enc + 1].1.clone())?;
    if head.classes() != header.class_names.len() {
        return Err(Error::Checkpoint(
            "head size does not match the class map".into(),
        ));
    }
    let model = TrainedModel {
        method: header.method,
        encoder,
        head,
        prototypes: PrototypeSet::new(protos, header.prototype_classes.clone())?,
        distance: header.distance,
        class_names: header.class_names.clone(),
        modality: header.modality,
    };
    Ok((model, header))
}

pub fn save(
    path: &Path,
    model: &TrainedModel,
    train: Option<&TrainConfig>,
    best_epoch: Option<usize>,
) -> Result<()> {
    let mut buf = Vec::new();
    write_checkpoint(model, train, best_epoch, &mut buf)?;
    std::fs::write(path, buf)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<(TrainedModel, Header)> {
    let bytes =
        std::fs::read(path).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
    read_checkpoint(&bytes[..])
}
