//! Experiment harness for `mlr-core`: declarative configuration, full runs,
//! ablation grids and embedding dumps.

pub mod ablate;
pub mod config;
pub mod embeddings;
pub mod run;

pub use ablate::{run_ablation, AblationKind, AblationRow, AblationTable};
pub use config::{ExperimentConfig, Method};
pub use embeddings::{dump_embeddings, read_embeddings, EmbeddingDump, EmbeddingSidecar};
pub use run::{run_experiment, run_pretrain, MetricsSummary, PretrainCache, RunSummary, SeedResult};

/// Process exit code for an error: 3 for numerical failures, 2 for
/// everything else (configuration, input and I/O problems).
pub fn exit_code(err: &anyhow::Error) -> i32 {
    let numerical = err
        .chain()
        .any(|e| matches!(e.downcast_ref::<mlr_core::Error>(), Some(mlr_core::Error::Numerical { .. })));
    if numerical {
        3
    } else {
        2
    }
}
