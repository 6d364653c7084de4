//! Knowledge-graph-driven masked language model pretraining at desk scale.
//!
//! The pipeline runs in stages, each with its own module:
//!
//! 1. [`kg`] loads an eventuality graph with weighted discourse edges.
//! 2. [`walk`] samples constrained weighted random walks into paths.
//! 3. [`verbalize`] turns paths into annotated token sequences using a
//!    [`lexicon`] of connectives and a [`vocab`].
//! 4. [`masking`] builds training instances with whole-eventuality or
//!    connective masking plus a co-occurrence candidate.
//! 5. [`model`] is a small pre-norm transformer encoder with masked-LM,
//!    relation and co-occurrence heads and hand-written gradients, trained by
//!    [`train`] with [`optim::AdamW`].
//! 6. [`probe`] runs connective cloze queries and plausibility choices.
//!
//! The numeric code is generic over [`Scalar`]; the aliases below pick the
//! usual precisions.

pub mod jsonl;
pub mod kg;
pub mod lexicon;
pub mod masking;
pub mod model;
pub mod optim;
pub mod pipeline;
pub mod probe;
pub mod scalar;
pub mod synth;
pub mod train;
pub mod verbalize;
pub mod vocab;
pub mod walk;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use kg::{Edge, Eventuality, GraphError, KnowledgeGraph, NodeId, RelationType};
pub use lexicon::ConnectiveLexicon;
pub use masking::{MaskConfig, MaskStrategy, TrainingInstance};
pub use model::{Batch, Encoder, LossBreakdown, LossSwitches, ModelConfig, Parameters};
pub use scalar::Scalar;
pub use train::{TrainConfig, TrainOutcome};
pub use verbalize::TokenSequence;
pub use vocab::Vocabulary;
pub use walk::{EventualityPath, WalkConfig, WalkSampler};

/// Single-precision encoder, used for training runs.
pub type Encoder32 = Encoder<f32>;
/// Double-precision encoder, used for gradient checks.
pub type Encoder64 = Encoder<f64>;
pub type Parameters32 = Parameters<f32>;
pub type Parameters64 = Parameters<f64>;
pub type TrainOutcome32 = TrainOutcome<f32>;
pub type TrainOutcome64 = TrainOutcome<f64>;

/// The one RNG used everywhere a seed is involved.
pub fn seeded_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
