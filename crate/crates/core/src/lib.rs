//! Multi-domain speech emotion recognition on precomputed feature bundles.
//!
//! The crate is organised bottom-up:
//!
//! - [`tensor`]: dense `f64` tensors with define-by-run reverse-mode autodiff.
//! - [`nn`]: parameter store, dense / conv / LSTM layers, dropout, cross-entropy.
//! - [`encoder`]: CNN → Bi-LSTM → single-head attention sequence encoder.
//! - [`contrastive`]: centroid-based contrastive auxiliary loss.
//! - [`gating`]: per-domain softmax gates over feature representations.
//! - [`nas`]: hard-concrete connectivity between low- and high-level embeddings.
//! - [`model`]: single-domain model and the Base / SB / OMoE / MMoE / Ours variants.
//! - [`train`]: AdamW, batching, dataset splits and the epoch loop.
//! - [`data`]: feature-bundle file format, manifests and a synthetic corpus generator.
//! - [`eval`]: WA / UA, compactness, gate reports and embedding dumps.

pub mod contrastive;
pub mod data;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod gating;
pub mod model;
pub mod nas;
pub mod nn;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
