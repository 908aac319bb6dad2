//! Full experiment runs: pretraining, every lifelong stage, evaluation after
//! each stage, and persistence of all artifacts.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use mlr_core::bench::{
    evaluate_policy, generate_suite, lifelong_metrics, separation_report, LifelongMetrics, SeparationReport,
    SuccessMatrix, Suite,
};
use mlr_core::ifa::{IfaConfig, ReferenceRegistry, TaskId};
use mlr_core::mlr::{BufferConfig, RawObservationDims, ReplayBuffer};
use mlr_core::policy::PolicyParams;
use mlr_core::rng::derive_seed;
use mlr_core::trainer::{lifelong_stage, pretrain, PretrainReport, StageReport, StageSpec, StepRecord, TrainConfig};
use mlr_core::Error as CoreError;
use serde::{Deserialize, Serialize};
use serde_json::json;
use sha2::{Digest, Sha256};

use crate::config::ExperimentConfig;

/// Seeds of the independent random streams of one run seed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Streams {
    pub suite: u64,
    pub init: u64,
    pub buffer: u64,
    pub train: u64,
    pub eval: u64,
}

impl Streams {
    pub fn new(seed: u64) -> Self {
        Self {
            suite: derive_seed(seed, "suite"),
            init: derive_seed(seed, "init"),
            buffer: derive_seed(seed, "buffer"),
            train: derive_seed(seed, "train"),
            eval: derive_seed(seed, "eval"),
        }
    }

    /// Evaluation seed of one task; identical across stages so every entry of
    /// a success-matrix column uses the same initial states.
    pub fn eval_task(&self, task: TaskId) -> u64 {
        derive_seed(self.eval, &format!("task-{task}"))
    }
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents)
        .map_err(CoreError::from)
        .with_context(|| format!("writing {}", path.display()))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_file(path, text)
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path)
        .map_err(CoreError::from)
        .with_context(|| format!("creating {}", path.display()))
}

pub fn seed_dir(run_dir: &Path, seed: u64) -> PathBuf {
    run_dir.join(format!("seed_{seed}"))
}

/// Pretrained parameters shared between runs whose suite, policy and
/// pretraining settings agree.
#[derive(Default)]
pub struct PretrainCache {
    entries: BTreeMap<String, Pretrained>,
}

#[derive(Clone)]
pub struct Pretrained {
    pub params: PolicyParams<f32>,
    pub report: PretrainReport,
    /// JSONL step log.
    pub log: String,
}

impl PretrainCache {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

fn pretrain_key(cfg: &ExperimentConfig, seed: u64) -> String {
    let v = json!({"suite": cfg.suite, "policy": cfg.policy, "pretrain": cfg.pretrain, "seed": seed});
    sha256_hex(v.to_string().as_bytes())
}

fn jsonl_line(out: &mut String, r: &StepRecord) {
    let _ = writeln!(out, "{}", serde_json::to_string(r).expect("record serializes"));
}

pub fn build_suite(cfg: &ExperimentConfig, seed: u64) -> Result<Suite> {
    Ok(generate_suite(&cfg.suite, &cfg.policy, Streams::new(seed).suite)?)
}

/// Pretrains (or fetches from `cache`) the policy of one seed.
pub fn pretrain_seed(cfg: &ExperimentConfig, suite: &Suite, seed: u64, cache: &mut PretrainCache) -> Result<Pretrained> {
    let key = pretrain_key(cfg, seed);
    if let Some(hit) = cache.entries.get(&key) {
        return Ok(hit.clone());
    }
    let streams = Streams::new(seed);
    let mut params = PolicyParams::<f32>::new(cfg.policy.clone(), &suite.language_table(), streams.init)?;
    let train = TrainConfig {
        seed: streams.train,
        ..cfg.pretrain.clone()
    };
    let mut log = String::new();
    let report = pretrain(suite, &mut params, &train, &mut |r| jsonl_line(&mut log, r))
        .with_context(|| format!("pretraining seed {seed}"))?;
    log::info!(
        "seed {seed}: pretrained in {:.1}s, loss {:.4} -> {:.4}",
        report.wall_time_s,
        report.initial_loss,
        report.final_loss
    );
    let out = Pretrained { params, report, log };
    cache.entries.insert(key, out.clone());
    Ok(out)
}

fn write_params(path: &Path, params: &PolicyParams<f32>) -> Result<()> {
    let f = fs::File::create(path).map_err(CoreError::from).with_context(|| format!("creating {}", path.display()))?;
    params.write_checkpoint(BufWriter::new(f))?;
    Ok(())
}

pub fn read_params(path: &Path) -> Result<PolicyParams<f32>> {
    let f = fs::File::open(path).map_err(CoreError::from).with_context(|| format!("opening {}", path.display()))?;
    Ok(PolicyParams::read_checkpoint(std::io::BufReader::new(f))?)
}

fn write_pretrain_artifacts(dir: &Path, pre: &Pretrained) -> Result<()> {
    create_dir(dir)?;
    write_file(&dir.join("pretrain.jsonl"), &pre.log)?;
    write_json(&dir.join("pretrain.json"), &pre.report)?;
    write_params(&dir.join("pretrain.mlrp"), &pre.params)
}

/// Mean and sample standard deviation of the lifelong metrics over seeds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsSummary {
    pub fwt: f64,
    pub nbt: f64,
    pub auc: f64,
    pub fwt_std: f64,
    pub nbt_std: f64,
    pub auc_std: f64,
    pub n_tasks: usize,
    pub seeds: Vec<u64>,
    pub nbt_defined: bool,
}

pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

impl MetricsSummary {
    pub fn from_seeds(seeds: &[u64], metrics: &[LifelongMetrics], n_tasks: usize) -> Self {
        let pick = |f: fn(&LifelongMetrics) -> f64| mean_std(&metrics.iter().map(f).collect::<Vec<_>>());
        let (fwt, fwt_std) = pick(|m| m.fwt);
        let (nbt, nbt_std) = pick(|m| m.nbt);
        let (auc, auc_std) = pick(|m| m.auc);
        Self {
            fwt,
            nbt,
            auc,
            fwt_std,
            nbt_std,
            auc_std,
            n_tasks,
            seeds: seeds.to_vec(),
            nbt_defined: metrics.iter().all(|m| m.nbt_defined),
        }
    }
}

/// Everything produced for one seed.
#[derive(Clone, Debug)]
pub struct SeedResult {
    pub seed: u64,
    pub matrix: SuccessMatrix,
    pub metrics: LifelongMetrics,
    pub pretrain: PretrainReport,
    pub stages: Vec<StageReport>,
    /// Per stage: the stage's tasks against every registered reference,
    /// measured right after the stage.
    pub stage_separation: Vec<SeparationReport>,
    /// All lifelong tasks against every reference after the last stage.
    pub final_separation: SeparationReport,
    pub final_buffer_bytes: u64,
}

#[derive(Clone, Debug)]
pub struct RunSummary {
    pub run_dir: PathBuf,
    pub metrics: MetricsSummary,
    pub seeds: Vec<SeedResult>,
}

#[derive(Serialize)]
struct Manifest<'a> {
    crate_name: &'a str,
    crate_version: &'a str,
    core_version: &'a str,
    config_sha256: String,
    method: &'a str,
    alpha: f64,
    lambda_ifa: f64,
    selection_fraction: f64,
    distance_mode: mlr_core::geometry::DistanceMode,
    store_probability: f64,
    per_task_capacity: usize,
    seeds: &'a [u64],
}

/// Writes `config.json` and a manifest hashing it.
fn write_config_and_manifest(cfg: &ExperimentConfig, dir: &Path) -> Result<()> {
    create_dir(dir)?;
    let mut text = serde_json::to_string_pretty(&cfg.to_value())?;
    text.push('\n');
    write_file(&dir.join("config.json"), &text)?;
    let manifest = Manifest {
        crate_name: env!("CARGO_PKG_NAME"),
        crate_version: env!("CARGO_PKG_VERSION"),
        core_version: mlr_core::VERSION,
        config_sha256: sha256_hex(text.as_bytes()),
        method: cfg.method.name(),
        alpha: cfg.ifa.alpha,
        lambda_ifa: cfg.effective_lambda(),
        selection_fraction: cfg.ifa.selection_fraction,
        distance_mode: cfg.ifa.distance_mode,
        store_probability: cfg.buffer.store_probability,
        per_task_capacity: cfg.per_task_capacity(),
        seeds: &cfg.seeds,
    };
    write_json(&dir.join("manifest.json"), &manifest)
}

/// Pretraining only, for every seed; writes the pretraining artifacts.
pub fn run_pretrain(cfg: &ExperimentConfig, cache: &mut PretrainCache) -> Result<PathBuf> {
    cfg.validate()?;
    let dir = cfg.output_dir.clone();
    write_config_and_manifest(cfg, &dir)?;
    for &seed in &cfg.seeds {
        let suite = build_suite(cfg, seed)?;
        let pre = pretrain_seed(cfg, &suite, seed, cache)?;
        write_pretrain_artifacts(&seed_dir(&dir, seed), &pre)?;
    }
    Ok(dir)
}

fn run_seed(cfg: &ExperimentConfig, seed: u64, dir: &Path, cache: &mut PretrainCache) -> Result<SeedResult> {
    let streams = Streams::new(seed);
    let suite = build_suite(cfg, seed)?;
    let pre = pretrain_seed(cfg, &suite, seed, cache)?;
    write_pretrain_artifacts(dir, &pre)?;
    let mut params = pre.params.clone();
    let frozen = params.frozen_hash();

    let mut buffer = if cfg.method.uses_buffer() {
        Some(ReplayBuffer::new(BufferConfig {
            shape: cfg.policy.latent_shape(),
            action_dim: cfg.policy.action_dim,
            per_task_capacity: cfg.per_task_capacity(),
            store_probability: cfg.buffer.store_probability,
            raw: RawObservationDims {
                view: cfg.policy.view,
                state_dim: cfg.policy.state_dim,
            },
            seed: streams.buffer,
        })?)
    } else {
        None
    };
    let ifa = IfaConfig {
        lambda_ifa: cfg.effective_lambda(),
        ..cfg.ifa.clone()
    };
    let train = TrainConfig {
        seed: streams.train,
        ..cfg.lifelong.clone()
    };

    let lifelong = suite.lifelong_tasks();
    let mut matrix = SuccessMatrix::new(lifelong.clone());
    let mut refs = ReferenceRegistry::new();
    let mut log = String::new();
    let mut pairs_log = String::new();
    let mut stages = Vec::new();
    let mut stage_separation = Vec::new();
    let mut seen: Vec<TaskId> = Vec::new();
    for (i, stage_tasks) in suite.stages.iter().enumerate() {
        let stage_index = i + 1;
        for &t in stage_tasks {
            refs.register(t, &suite.task(t)?.language_embedding, stage_index)?;
        }
        let spec = StageSpec {
            stage_index,
            tasks: stage_tasks,
            old_tasks: &seen,
        };
        let report = lifelong_stage(
            spec,
            &suite,
            &mut params,
            buffer.as_mut(),
            &refs,
            &train,
            &ifa,
            &mut |r| jsonl_line(&mut log, r),
        )
        .with_context(|| format!("seed {seed}, stage {stage_index}"))?;
        if params.frozen_hash() != frozen {
            return Err(CoreError::Internal(format!("frozen blocks changed during stage {stage_index}")).into());
        }
        seen.extend_from_slice(stage_tasks);

        let success: Vec<f64> = seen
            .iter()
            .map(|&t| evaluate_policy(&params, &suite, t, cfg.eval_trials, streams.eval_task(t)))
            .collect::<mlr_core::Result<_>>()?;
        for &row_task in stage_tasks {
            let row = lifelong.iter().position(|&t| t == row_task).expect("lifelong task");
            for (col, &s) in success.iter().enumerate().take(row + 1) {
                matrix.set(row, col, s as f32)?;
            }
        }
        let sep = separation_report(&params, &suite, &refs, stage_tasks, cfg.eval_trials.max(1), streams.eval)?;
        log::info!(
            "seed {seed} stage {stage_index}: bc {:.4} ifa {:.4} pairs {:?} success {:?} ({:.1}s)",
            report.final_loss_bc,
            report.final_loss_ifa,
            report.pairs,
            success,
            report.wall_time_s
        );

        let _ = writeln!(
            pairs_log,
            "{}",
            json!({"stage": stage_index, "tasks": stage_tasks, "pairs": report.pairs})
        );
        write_json(&dir.join(format!("stage_{stage_index}.json")), &report)?;
        write_json(&dir.join(format!("separation_stage_{stage_index}.json")), &sep)?;
        write_params(&dir.join(format!("stage_{stage_index}.mlrp")), &params)?;
        if let Some(b) = &buffer {
            let path = dir.join(format!("buffer_stage_{stage_index}.mlrb"));
            let f = fs::File::create(&path).map_err(CoreError::from)?;
            b.write_checkpoint(BufWriter::new(f))?;
        }
        stages.push(report);
        stage_separation.push(sep);
    }
    let final_separation = separation_report(&params, &suite, &refs, &lifelong, cfg.eval_trials.max(1), streams.eval)?;
    let metrics = lifelong_metrics(&matrix)?;
    write_file(&dir.join("lifelong.jsonl"), &log)?;
    write_file(&dir.join("pairs.jsonl"), &pairs_log)?;
    write_file(&dir.join("success_matrix.csv"), matrix.to_csv())?;
    write_json(&dir.join("separation.json"), &final_separation)?;
    write_json(
        &dir.join("metrics.json"),
        &MetricsSummary::from_seeds(&[seed], &[metrics], matrix.len()),
    )?;
    Ok(SeedResult {
        seed,
        matrix,
        metrics,
        pretrain: pre.report,
        stages,
        stage_separation,
        final_separation,
        final_buffer_bytes: buffer.map_or(0, |b| b.memory_stats().total_bytes_latent),
    })
}

/// Runs pretraining and every lifelong stage for each configured seed.
pub fn run_experiment(cfg: &ExperimentConfig, cache: &mut PretrainCache) -> Result<RunSummary> {
    cfg.validate()?;
    let run_dir = cfg.output_dir.clone();
    write_config_and_manifest(cfg, &run_dir)?;
    let mut seeds = Vec::with_capacity(cfg.seeds.len());
    for &seed in &cfg.seeds {
        let dir = seed_dir(&run_dir, seed);
        create_dir(&dir)?;
        seeds.push(run_seed(cfg, seed, &dir, cache)?);
    }
    let metrics = MetricsSummary::from_seeds(
        &cfg.seeds,
        &seeds.iter().map(|s| s.metrics).collect::<Vec<_>>(),
        cfg.suite.n_lifelong,
    );
    write_json(&run_dir.join("metrics.json"), &metrics)?;
    Ok(RunSummary { run_dir, metrics, seeds })
}
