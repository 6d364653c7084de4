//! JSON checkpoints: config plus every tensor under its name.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::params::Parameters;
use super::tensor::Matrix;
use super::{Encoder, ModelConfig, ModelError};
use crate::scalar::Scalar;

pub const CHECKPOINT_FORMAT: &str = "eventlm-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct TensorRecord {
    name: String,
    shape: [usize; 2],
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    format: String,
    version: u32,
    scalar: String,
    config: ModelConfig,
    tensors: Vec<TensorRecord>,
}

/// Hex sha256 of a file's bytes.
pub fn file_digest(path: &Path) -> std::io::Result<String> {
    Ok(hex::encode(Sha256::digest(fs::read(path)?)))
}

impl<F: Scalar> Encoder<F> {
    pub fn write_checkpoint<W: Write>(&self, out: W) -> Result<(), ModelError> {
        let file = CheckpointFile {
            format: CHECKPOINT_FORMAT.to_string(),
            version: CHECKPOINT_VERSION,
            scalar: F::TAG.to_string(),
            config: self.config.clone(),
            tensors: self
                .params
                .entries()
                .into_iter()
                .map(|(name, _, m)| TensorRecord {
                    name,
                    shape: [m.rows, m.cols],
                    data: m.data.iter().map(|x| x.as_f64()).collect(),
                })
                .collect(),
        };
        let mut w = BufWriter::new(out);
        serde_json::to_writer(&mut w, &file)?;
        w.write_all(b"\n")?;
        w.flush()?;
        Ok(())
    }

    /// Reads a checkpoint written at any precision, validating names and
    /// shapes against the stored config.
    pub fn read_checkpoint(bytes: &[u8]) -> Result<Self, ModelError> {
        let file: CheckpointFile = serde_json::from_slice(bytes)?;
        if file.format != CHECKPOINT_FORMAT {
            return Err(ModelError::Checkpoint(format!("unknown format {:?}", file.format)));
        }
        if file.version != CHECKPOINT_VERSION {
            return Err(ModelError::Checkpoint(format!("unsupported version {}", file.version)));
        }
        file.config.validate()?;
        let mut params = Parameters::<F>::zeros(&file.config);
        let mut records = file.tensors.into_iter();
        for (name, _, m) in params.entries_mut() {
            let rec = records
                .next()
                .ok_or_else(|| ModelError::Checkpoint(format!("missing tensor {name}")))?;
            if rec.name != name {
                return Err(ModelError::Checkpoint(format!("expected tensor {name}, found {}", rec.name)));
            }
            let found = (rec.shape[0], rec.shape[1]);
            if found != (m.rows, m.cols) || rec.data.len() != m.rows * m.cols {
                return Err(ModelError::ShapeMismatch {
                    tensor: name,
                    expected: (m.rows, m.cols),
                    found,
                });
            }
            *m = Matrix {
                rows: m.rows,
                cols: m.cols,
                data: rec.data.into_iter().map(F::of).collect(),
            };
        }
        if let Some(extra) = records.next() {
            return Err(ModelError::Checkpoint(format!("unexpected tensor {}", extra.name)));
        }
        Encoder::from_parameters(file.config, params)
    }

    pub fn save(&self, path: &Path) -> Result<(), ModelError> {
        self.write_checkpoint(fs::File::create(path)?)
    }

    pub fn load(path: &Path) -> Result<Self, ModelError> {
        Self::read_checkpoint(&fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> ModelConfig {
        ModelConfig {
            vocab_size: 25,
            d_model: 8,
            num_heads: 2,
            d_ff: 16,
            max_len: 12,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn round_trips_exactly_at_both_precisions() {
        let e32 = Encoder::<f32>::new(cfg(), 9).unwrap();
        let mut buf = Vec::new();
        e32.write_checkpoint(&mut buf).unwrap();
        assert_eq!(Encoder::<f32>::read_checkpoint(&buf).unwrap(), e32);

        let e64 = Encoder::<f64>::new(cfg(), 9).unwrap();
        let mut buf = Vec::new();
        e64.write_checkpoint(&mut buf).unwrap();
        assert_eq!(Encoder::<f64>::read_checkpoint(&buf).unwrap(), e64);
    }

    #[test]
    fn rejects_wrong_shapes_and_formats() {
        let e = Encoder::<f64>::new(cfg(), 1).unwrap();
        let mut buf = Vec::new();
        e.write_checkpoint(&mut buf).unwrap();
        let mut v: serde_json::Value = serde_json::from_slice(&buf).unwrap();
        v["config"]["d_ff"] = 20.into();
        let bytes = serde_json::to_vec(&v).unwrap();
        assert!(matches!(
            Encoder::<f64>::read_checkpoint(&bytes),
            Err(ModelError::ShapeMismatch { .. })
        ));
        v["format"] = "other".into();
        let bytes = serde_json::to_vec(&v).unwrap();
        assert!(matches!(Encoder::<f64>::read_checkpoint(&bytes), Err(ModelError::Checkpoint(_))));
    }
}
