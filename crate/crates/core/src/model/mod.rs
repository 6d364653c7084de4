//! Pre-norm transformer encoder with three heads and hand-written gradients.
//!
//! Each example runs at its own length. Attention never crosses examples, so
//! this matches a padded batch whose attention mask hides the padding; hidden
//! states of padded positions are reported as zeros.
//!
//! Inputs sum token, position and segment embeddings; the segment switches
//! after the first `[SEP]`.
//!
//! Heads:
//! * masked LM: `x_i E^T + b` with `E` the token embedding table,
//! * relation: `x_i W_r + b_r` at the first token of each masked connective,
//! * co-occurrence: `x_cls W_c + b_c` when a candidate segment is present.

mod batch;
mod checkpoint;
mod encoder;
pub mod gradcheck;
mod loss;
mod params;
pub mod tensor;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kg::RelationType;
use crate::scalar::Scalar;

pub use batch::{Batch, Example, LossSwitches};
pub use checkpoint::{file_digest, CHECKPOINT_FORMAT, CHECKPOINT_VERSION};
pub use encoder::{Activations, ForwardPass};
pub use loss::{combine, cross_entropy, InstanceLoss, LossBreakdown};
pub use params::{LayerParams, Parameters, TensorKind};
pub use tensor::Matrix;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("sequence of length {len} exceeds max_len {max_len}")]
    SequenceTooLong { len: usize, max_len: usize },
    #[error("token id {token} is outside the vocabulary of size {vocab_size}")]
    InvalidToken { token: u32, vocab_size: usize },
    #[error("label position {position} is outside a sequence of length {len}")]
    MissingLabelPosition { position: usize, len: usize },
    #[error("label {label} is outside the {classes} classes of its head")]
    InvalidLabel { label: usize, classes: usize },
    #[error("tensor {tensor} has shape {found:?}, expected {expected:?}")]
    ShapeMismatch {
        tensor: String,
        expected: (usize, usize),
        found: (usize, usize),
    },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub d_ff: usize,
    pub max_len: usize,
    pub num_relations: usize,
    pub dropout_rate: f64,
    pub init_std: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            vocab_size: 0,
            d_model: 128,
            num_layers: 2,
            num_heads: 4,
            d_ff: 512,
            max_len: 128,
            num_relations: RelationType::NUM_DISCOURSE,
            dropout_rate: 0.1,
            init_std: 0.02,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::InvalidConfig(m));
        if self.vocab_size == 0 {
            return bad("vocab_size must be positive".into());
        }
        if self.d_model == 0 || self.num_heads == 0 || self.d_ff == 0 || self.max_len == 0 {
            return bad("d_model, num_heads, d_ff and max_len must be positive".into());
        }
        if self.d_model % self.num_heads != 0 {
            return bad(format!(
                "d_model {} is not divisible by num_heads {}",
                self.d_model, self.num_heads
            ));
        }
        if self.num_relations == 0 {
            return bad("num_relations must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return bad(format!("dropout_rate {} must be in [0, 1)", self.dropout_rate));
        }
        if !(self.init_std.is_finite() && self.init_std > 0.0) {
            return bad(format!("init_std {} must be positive", self.init_std));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.num_heads
    }
}

/// Configuration plus parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Encoder<F> {
    config: ModelConfig,
    params: Parameters<F>,
}

impl<F: Scalar> Encoder<F> {
    /// Fresh encoder with parameters drawn from `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let params = Parameters::init(&config, &mut crate::seeded_rng(seed));
        Ok(Encoder { config, params })
    }

    /// Wraps existing parameters after checking every shape.
    pub fn from_parameters(config: ModelConfig, params: Parameters<F>) -> Result<Self, ModelError> {
        config.validate()?;
        let expected = Parameters::<F>::zeros(&config);
        let want = expected.entries();
        let got = params.entries();
        if want.len() != got.len() {
            return Err(ModelError::Checkpoint(format!(
                "expected {} tensors, found {}",
                want.len(),
                got.len()
            )));
        }
        for ((name, _, w), (_, _, g)) in want.iter().zip(&got) {
            if (w.rows, w.cols) != (g.rows, g.cols) || g.data.len() != g.rows * g.cols {
                return Err(ModelError::ShapeMismatch {
                    tensor: name.clone(),
                    expected: (w.rows, w.cols),
                    found: (g.rows, g.cols),
                });
            }
        }
        Ok(Encoder { config, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &Parameters<F> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut Parameters<F> {
        &mut self.params
    }

    pub fn into_parameters(self) -> Parameters<F> {
        self.params
    }

    pub fn cast<G: Scalar>(&self) -> Encoder<G> {
        Encoder {
            config: self.config.clone(),
            params: self.params.cast(),
        }
    }
}
