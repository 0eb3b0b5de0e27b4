//! Grounded text generation at desk scale: hybrid lexical/dense retrieval
//! over a bundled corpus, a toy decoder-only transformer whose only trainable
//! parameters are low-rank adapters on the attention Q/V projections, a
//! hallucination detector that gates those adapters, and a KL-regularized
//! contrastive correction loop that trains them against a frozen reference
//! distribution.
//!
//! All numeric code is generic over the scalar type (`f32` or `f64`, see
//! [`scalar::Scalar`]); the pipeline default is `f64`. Concrete aliases for
//! the main entry types live at the crate root.

pub mod corpus;
pub mod detect;
pub mod dist;
pub mod embed;
pub mod error;
pub mod feedback;
pub mod linalg;
pub mod metrics;
pub mod model;
pub mod pipeline;
pub mod planted;
pub mod prompt;
pub mod retrieval;
pub mod scalar;

pub use error::{Error, Result};

/// Default pipeline precision.
pub type DefaultScalar = f64;

pub type Model32 = model::ToyTransformer<f32>;
pub type Model64 = model::ToyTransformer<f64>;
pub type Adapters32 = model::LoraAdapterStack<f32>;
pub type Adapters64 = model::LoraAdapterStack<f64>;
pub type Distribution32 = dist::TokenDistribution<f32>;
pub type Distribution64 = dist::TokenDistribution<f64>;
pub type Classifier32 = detect::ClassifierParams<f32>;
pub type Classifier64 = detect::ClassifierParams<f64>;
pub type Embeddings64 = embed::EmbeddingTable<f64>;
