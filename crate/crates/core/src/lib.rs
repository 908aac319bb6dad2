//! Lifelong imitation learning with multimodal latent replay (MLR) and
//! incremental feature adjustment (IFA).
//!
//! - [`geometry`]: cosine/angular distances and the adaptive margin
//! - [`ifa`]: task references, pair selection and the hinge loss
//! - [`mlr`]: the latent replay buffer
//! - [`policy`]: encoders, FiLM modulation, temporal decoder and head
//! - [`trainer`]: pretraining, lifelong stages, AdamW and the LR schedule
//! - [`bench`]: synthetic task suites, evaluation and lifelong metrics

pub mod bench;
pub mod error;
pub mod geometry;
pub mod ifa;
pub mod mlr;
pub mod policy;
pub mod rng;
pub mod trainer;

pub use error::{Error, Result};

/// Version of this crate, recorded in run manifests.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
