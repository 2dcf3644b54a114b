//! Pair-level supervised contrastive learning for sentence-pair
//! classification, built on a small dense kernel with hand-written
//! backward passes.
//!
//! The pieces, bottom up:
//!
//! - [`tensor`]: matrices, activations, softmax, layer norm, pooling, and
//!   their backward rules; [`gradcheck`] verifies them by central differences.
//! - [`encoder`]: token ids to per-token hidden states.
//! - [`crossattn`]: co-attention, alignment, enhancement, and aggregation
//!   into a pair representation `z`.
//! - [`objectives`]: supervised contrastive loss, cross-entropy head, and
//!   their weighted sum.
//! - [`model`]: the full and concatenation wirings behind one forward/backward API.
//! - [`optim`]: the Adam optimizer.
//! - [`data`]: synthetic NLI-style data, JSONL/TSV ingestion, vocabularies, batching.
//! - [`train`]: the training loop, ablation wiring, and checkpoints.
//! - [`evalab`]: evaluation reports, ablation sweeps, and representation geometry.

pub mod crossattn;
pub mod data;
pub mod encoder;
pub mod error;
pub mod evalab;
pub mod gradcheck;
pub mod model;
pub mod objectives;
pub mod optim;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
