//! Neighbour retrieval through per-query backdoor triggers (TMM-NN).
//!
//! A pretrained classifier with one extra "dummy" output is fine-tuned per
//! query so that the query, blended with a query-local trigger, is sent to
//! the dummy class while everything else keeps its label. Exemplars are then
//! ranked by how strongly the same trigger pushes them into the dummy class.
//!
//! The crate is organised by pipeline stage:
//!
//! - [`autodiff`]: tape-based reverse-mode differentiation and Adam.
//! - [`model`]: the dense classifier, pretraining, Fisher estimation, checkpoints.
//! - [`trigger`]: trigger construction, optimization and blending.
//! - [`finetune`]: backdoor fine-tuning with an EWC penalty.
//! - [`retrieval`]: trigger-confidence and feature-space rankings.
//! - [`robustness`]: self-retrieval benchmarks and margin/Lipschitz/OOD diagnostics.
//! - [`ablation`]: trigger-type, layer-choice and epoch sweeps.
//! - [`data`]: synthetic data, IDX ingestion, report emission.
//! - [`pipeline`]: the per-query trigger → fine-tune → rank procedure.
//! - [`config`]: the JSON run configuration.

// `!(x > 0.0)` is used on purpose so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::too_many_arguments)]

pub mod ablation;
pub mod autodiff;
pub mod config;
pub mod data;
pub mod error;
pub mod finetune;
pub mod model;
pub mod pipeline;
pub mod retrieval;
pub mod robustness;
pub mod trigger;
mod util;

pub use error::{Error, Result};
