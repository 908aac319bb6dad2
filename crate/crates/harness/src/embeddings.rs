//! Global-latent dumps for offline visualization: a JSON sidecar plus a
//! row-major little-endian `f32` payload.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use mlr_core::bench::collect_globals;
use mlr_core::ifa::TaskId;
use mlr_core::Error as CoreError;
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::run::{build_suite, read_params, seed_dir, Streams};

/// Sidecar describing the payload: `n_globals` evaluation-time global
/// latents followed by `n_references` task references, each `dim` wide.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingSidecar {
    pub stage: usize,
    pub seed: u64,
    pub dim: usize,
    pub n_globals: usize,
    pub n_references: usize,
    /// Task of each global row.
    pub labels: Vec<TaskId>,
    /// Task of each reference row.
    pub reference_labels: Vec<TaskId>,
    pub payload: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingDump {
    pub sidecar: EmbeddingSidecar,
    pub rows: Vec<Vec<f32>>,
}

fn input_error(msg: String) -> anyhow::Error {
    CoreError::Config(msg).into()
}

/// Loads the checkpoint of `stage` (0 = after pretraining) from a run
/// directory, rolls evaluation trajectories of every lifelong task seen by
/// then, and writes `embeddings_stage_<stage>.{json,f32}` next to it.
pub fn dump_embeddings(run_dir: &Path, seed: u64, stage: usize) -> Result<PathBuf> {
    let config_path = run_dir.join("config.json");
    let text = fs::read_to_string(&config_path)
        .map_err(|e| input_error(format!("{}: {e}", config_path.display())))?;
    let cfg = ExperimentConfig::from_value(serde_json::from_str(&text)?)?;
    let dir = seed_dir(run_dir, seed);
    let ckpt = if stage == 0 {
        dir.join("pretrain.mlrp")
    } else {
        dir.join(format!("stage_{stage}.mlrp"))
    };
    if !ckpt.exists() {
        return Err(input_error(format!("missing checkpoint {}", ckpt.display())));
    }
    let params = read_params(&ckpt)?;
    let suite = build_suite(&cfg, seed)?;
    if stage > suite.stages.len() {
        return Err(input_error(format!("run has only {} stages", suite.stages.len())));
    }
    let streams = Streams::new(seed);
    let seen: Vec<TaskId> = suite.stages[..stage].iter().flatten().copied().collect();

    let mut rows = Vec::new();
    let mut labels = Vec::new();
    for &t in &seen {
        let globals = collect_globals(&params, &suite, t, cfg.eval_trials, streams.eval)?;
        labels.extend(std::iter::repeat_n(t, globals.len()));
        rows.extend(globals);
    }
    let n_globals = rows.len();
    for &t in &seen {
        let h = suite.task(t)?.language_embedding.normalized()?;
        rows.push(h.into_inner());
    }
    let payload = format!("embeddings_stage_{stage}.f32");
    let sidecar = EmbeddingSidecar {
        stage,
        seed,
        dim: cfg.policy.embed,
        n_globals,
        n_references: seen.len(),
        labels,
        reference_labels: seen,
        payload: payload.clone(),
    };
    let bytes: Vec<u8> = rows.iter().flatten().flat_map(|v| v.to_le_bytes()).collect();
    fs::write(dir.join(&payload), bytes).map_err(CoreError::from)?;
    let path = dir.join(format!("embeddings_stage_{stage}.json"));
    fs::write(&path, serde_json::to_string_pretty(&sidecar)? + "\n").map_err(CoreError::from)?;
    Ok(path)
}

/// Reads a sidecar and its payload back.
pub fn read_embeddings(sidecar_path: &Path) -> Result<EmbeddingDump> {
    let text = fs::read_to_string(sidecar_path)
        .map_err(CoreError::from)
        .with_context(|| format!("reading {}", sidecar_path.display()))?;
    let sidecar: EmbeddingSidecar = serde_json::from_str(&text)?;
    let payload_path = sidecar_path.with_file_name(&sidecar.payload);
    let bytes = fs::read(&payload_path).map_err(CoreError::from)?;
    let n_rows = sidecar.n_globals + sidecar.n_references;
    if bytes.len() != n_rows * sidecar.dim * 4 || sidecar.labels.len() != sidecar.n_globals {
        return Err(CoreError::Format(format!("{} does not match its sidecar", payload_path.display())).into());
    }
    let values: Vec<f32> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    let rows = if sidecar.dim == 0 {
        Vec::new()
    } else {
        values.chunks(sidecar.dim).map(<[f32]>::to_vec).collect()
    };
    Ok(EmbeddingDump { sidecar, rows })
}
