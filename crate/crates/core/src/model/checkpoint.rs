//! Checkpoint layout: the 5 magic bytes `NEOC1`, one line of compact JSON
//! header terminated by `\n`, then the raw weight blob as little-endian f32
//! in parameter storage order.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{ArchitectureConfig, Model, ModelError, Normalization, Result};
use crate::tensor::{Parameter, Real, Tensor};

pub const MAGIC: &[u8; 5] = b"NEOC1";

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    arch: ArchitectureConfig,
    class_names: Vec<String>,
    normalization: Normalization,
    #[serde(default)]
    lineage: Option<String>,
    weight_bytes: usize,
}

impl<T: Real> Model<T> {
    /// Serializes to checkpoint bytes. Weights are stored as f32 regardless
    /// of the model precision.
    pub fn to_checkpoint_bytes(&self) -> Result<Vec<u8>> {
        if self.class_names.len() != self.num_classes() {
            return Err(ModelError::ClassNames {
                expected: self.num_classes(),
                actual: self.class_names.len(),
            });
        }
        let header = Header {
            arch: self.arch.clone(),
            class_names: self.class_names.clone(),
            normalization: self.normalization.clone(),
            lineage: self.lineage.clone(),
            weight_bytes: 4 * self.parameter_count(),
        };
        let mut bytes = MAGIC.to_vec();
        serde_json::to_writer(&mut bytes, &header)?;
        bytes.push(b'\n');
        for p in &self.params {
            for v in p.value.data() {
                bytes.extend_from_slice(&(v.to_f64_lossy() as f32).to_le_bytes());
            }
        }
        Ok(bytes)
    }

    pub fn from_checkpoint_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() {
            if MAGIC.starts_with(bytes) {
                return Err(ModelError::Truncated {
                    section: "magic",
                    expected: MAGIC.len(),
                    actual: bytes.len(),
                });
            }
            return Err(ModelError::BadMagic(bytes.to_vec()));
        }
        let (magic, rest) = bytes.split_at(MAGIC.len());
        if magic != MAGIC {
            return Err(ModelError::BadMagic(magic.to_vec()));
        }
        let newline = rest
            .iter()
            .position(|&b| b == b'\n')
            .ok_or(ModelError::Truncated {
                section: "header",
                expected: rest.len() + 1,
                actual: rest.len(),
            })?;
        let header: Header = serde_json::from_slice(&rest[..newline])?;
        let blob = &rest[newline + 1..];

        header
            .arch
            .validate()
            .map_err(|e| ModelError::ShapeMismatch(e.to_string()))?;
        let shapes = header.arch.parameter_shapes();
        let expected_bytes = 4 * header.arch.parameter_count();
        if header.weight_bytes != expected_bytes {
            return Err(ModelError::ShapeMismatch(format!(
                "header declares {} weight bytes but the architecture needs {expected_bytes}",
                header.weight_bytes
            )));
        }
        if header.class_names.len() != header.arch.num_classes {
            return Err(ModelError::ShapeMismatch(format!(
                "{} class names for {} outputs",
                header.class_names.len(),
                header.arch.num_classes
            )));
        }
        if header.normalization.mean.len() != header.arch.input_size.0
            || header.normalization.std.len() != header.arch.input_size.0
        {
            return Err(ModelError::ShapeMismatch(
                "normalization statistics do not match input channels".into(),
            ));
        }
        if blob.len() < expected_bytes {
            return Err(ModelError::Truncated {
                section: "weights",
                expected: expected_bytes,
                actual: blob.len(),
            });
        }
        if blob.len() > expected_bytes {
            return Err(ModelError::ShapeMismatch(format!(
                "{} trailing bytes after the weight blob",
                blob.len() - expected_bytes
            )));
        }

        let mut floats = blob
            .chunks_exact(4)
            .map(|c| T::from_f64_lossy(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64));
        let params = shapes
            .into_iter()
            .map(|(name, shape)| {
                let n = shape.iter().product();
                let data: Vec<T> = floats.by_ref().take(n).collect();
                Tensor::new(shape, data).map(|t| Parameter::new(name, t))
            })
            .collect::<std::result::Result<Vec<_>, _>>()?;

        Ok(Model::from_parts(
            header.arch,
            header.class_names,
            header.normalization,
            header.lineage,
            params,
        ))
    }
}

pub fn save_checkpoint<T: Real>(model: &Model<T>, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, model.to_checkpoint_bytes()?)?;
    Ok(())
}

pub fn load_checkpoint<T: Real>(path: impl AsRef<Path>) -> Result<Model<T>> {
    Model::from_checkpoint_bytes(&std::fs::read(path)?)
}

/// Hex SHA-256 of checkpoint bytes, used as fine-tuning lineage.
pub fn checkpoint_digest(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}
