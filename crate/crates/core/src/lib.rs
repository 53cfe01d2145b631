//! Memory-budgeted end-to-end training for temporal action localization.
//!
//! A video encoder and a temporal localization head are optimized jointly on
//! low-fidelity mini-batches (fewer snippets, smaller frames, or both) whose
//! per-video activation volume stays roughly constant. The crate contains the
//! whole desk-scale pipeline: a synthetic untrimmed-video generator, snippet
//! sampling, a small TSM-style encoder and anchor head with hand-written
//! backpropagation, the cyclic fidelity scheduler and memory cost model, the
//! three-stage trainer and the evaluation suite (soft-NMS, mAP, AR@k, AUC).

pub mod domain;
pub mod error;
pub mod eval;
pub mod fidelity;
pub mod models;
pub mod pipeline;
pub mod snippets;
pub mod synthgen;
pub mod tensor;
pub mod util;

pub use error::{Error, Result};
