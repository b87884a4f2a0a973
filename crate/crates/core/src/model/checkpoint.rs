//! `ATSG1` checkpoint files.
//!
//! Layout: the line `ATSG1`, then one line of JSON holding the hyperparameters
//! and a tensor manifest (`name`, `shape`, byte `offset` into the payload),
//! then the payload: every tensor's elements as little-endian `f64`, in
//! manifest order.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{init_pretraining_head, init_weights, Hyperparams, Model};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &str = "ATSG1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub hyperparams: Hyperparams,
    pub tensors: Vec<TensorEntry>,
}

pub fn encode(model: &Model) -> Vec<u8> {
    let mut tensors = Vec::new();
    let mut offset = 0;
    for (name, t) in model.weights.named() {
        tensors.push(TensorEntry {
            name,
            shape: t.shape().to_vec(),
            offset,
        });
        offset += t.len() * 8;
    }
    let manifest = Manifest {
        hyperparams: model.hp.clone(),
        tensors,
    };
    let header = serde_json::to_string(&manifest).expect("manifest serializes");
    let mut out = Vec::with_capacity(MAGIC.len() + header.len() + 2 + offset);
    out.extend_from_slice(MAGIC.as_bytes());
    out.push(b'\n');
    out.extend_from_slice(header.as_bytes());
    out.push(b'\n');
    for t in model.weights.values() {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

fn split_header<'a>(bytes: &'a [u8], path: &Path) -> Result<(Manifest, &'a [u8])> {
    let rest = bytes
        .strip_prefix(MAGIC.as_bytes())
        .and_then(|r| r.strip_prefix(b"\n"))
        .ok_or_else(|| Error::BadMagic {
            path: path.to_path_buf(),
            expected: MAGIC,
        })?;
    let nl = rest
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| header_err(path, "missing manifest line".into()))?;
    let manifest: Manifest =
        serde_json::from_slice(&rest[..nl]).map_err(|e| header_err(path, e.to_string()))?;
    Ok((manifest, &rest[nl + 1..]))
}

fn header_err(path: &Path, reason: String) -> Error {
    Error::Header {
        path: path.to_path_buf(),
        reason,
    }
}

pub fn decode(bytes: &[u8], path: &Path) -> Result<Model> {
    let (manifest, payload) = split_header(bytes, path)?;
    let header_err = |reason: String| header_err(path, reason);
    manifest.hyperparams.validate()?;

    let expected: usize = manifest
        .tensors
        .iter()
        .map(|e| e.shape.iter().product::<usize>() * 8)
        .sum();
    if payload.len() != expected {
        return Err(Error::LengthMismatch {
            path: path.to_path_buf(),
            expected,
            found: payload.len(),
        });
    }

    let mut by_name: BTreeMap<&str, &TensorEntry> = BTreeMap::new();
    for e in &manifest.tensors {
        if by_name.insert(&e.name, e).is_some() {
            return Err(header_err(format!("duplicate tensor {}", e.name)));
        }
    }
    let hp = manifest.hyperparams.clone();
    let mut weights = init_weights(&hp, 0);
    if !by_name.contains_key("seg_head.weight") {
        weights.seg_head = None;
    }
    if by_name.contains_key("pretrain_head.weight") {
        weights.pretrain_head = Some(init_pretraining_head(&hp, 0));
    }
    if weights.tensor_count() != by_name.len() {
        return Err(header_err(format!(
            "manifest lists {} tensors, configuration needs {}",
            by_name.len(),
            weights.tensor_count()
        )));
    }
    let mut failure = None;
    weights.for_each_mut(|name, t| {
        if failure.is_some() {
            return;
        }
        let Some(entry) = by_name.get(name) else {
            failure = Some(header_err(format!("tensor {name} missing")));
            return;
        };
        if entry.shape != t.shape() {
            failure = Some(header_err(format!(
                "tensor {name} has shape {:?}, expected {:?}",
                entry.shape,
                t.shape()
            )));
            return;
        }
        let len = t.len();
        let Some(raw) = payload.get(entry.offset..entry.offset + len * 8) else {
            failure = Some(header_err(format!("tensor {name} offset out of range")));
            return;
        };
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        match Tensor::new(entry.shape.clone(), data) {
            Ok(v) => *t = v,
            Err(e) => failure = Some(e),
        }
    });
    if let Some(e) = failure {
        return Err(e);
    }
    Ok(Model { hp, weights })
}

pub fn save(path: impl AsRef<Path>, model: &Model) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode(model)).map_err(|e| Error::io(path, e))
}

pub fn load(path: impl AsRef<Path>) -> Result<Model> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, path)
}

/// Reads only the manifest line of a checkpoint.
pub fn read_manifest(path: impl AsRef<Path>) -> Result<Manifest> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(split_header(&bytes, path)?.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bit_exact() {
        let mut model = Model::new(Hyperparams::tiny(), 11).unwrap();
        model.weights.pretrain_head = Some(init_pretraining_head(&model.hp, 12));
        let bytes = encode(&model);
        let back = decode(&bytes, Path::new("mem")).unwrap();
        assert_eq!(back, model);
        assert_eq!(encode(&back), bytes);
    }

    #[test]
    fn missing_head_stays_missing() {
        let mut model = Model::new(Hyperparams::tiny(), 1).unwrap();
        model.weights.seg_head = None;
        model.weights.pretrain_head = Some(init_pretraining_head(&model.hp, 2));
        let back = decode(&encode(&model), Path::new("mem")).unwrap();
        assert!(back.weights.seg_head.is_none());
        assert_eq!(back, model);
    }

    #[test]
    fn corrupt_inputs_are_rejected() {
        let model = Model::new(Hyperparams::tiny(), 1).unwrap();
        let bytes = encode(&model);
        assert!(matches!(
            decode(b"NOPE\n{}\n", Path::new("x")),
            Err(Error::BadMagic { .. })
        ));
        assert!(matches!(
            decode(&bytes[..bytes.len() - 3], Path::new("x")),
            Err(Error::LengthMismatch { .. })
        ));
    }
}
