//! Anatomically guided lymph node detection and metastasis prediction
//! pipeline: distance-guided attention maps from organ/vessel masks,
//! attention-gated segmentation training, instance identification,
//! patient-level aggregation, tumor feature fusion, and an evaluation and
//! statistics harness, all runnable on a built-in synthetic phantom cohort.

pub mod error;
pub mod aggregate;
pub mod config;
pub mod fusion;
pub mod instance;
pub mod learn;
pub mod metrics;
pub mod phantom;
pub mod sampler;
pub mod split;
pub mod distance;
pub mod volume;

pub use error::{Error, Result};
