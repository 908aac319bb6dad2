//! Multi-task pretraining and the sequential lifelong stages.
//!
//! Pretraining fits every non-backbone block on pooled base-task
//! demonstrations. Each lifelong stage then fine-tunes only the temporal
//! decoder and head on the stage's windows mixed with replayed latents, with
//! the feature-adjustment hinge pushing the new tasks' global latents away
//! from similar old tasks.

use std::collections::{BTreeMap, BTreeSet};
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::bench::Suite;
use crate::error::{config, domain, Error, Result};
use crate::geometry::Embedding;
use crate::ifa::{ifa_loss, select_pairs, IfaConfig, PairSet, ReferenceRegistry, TaskId, TaskLatents};
use crate::mlr::{BufferEntry, LatentSequence, MemoryStats, ReplayBuffer, AGENT_VIEW};
use crate::policy::{cast_vec, window_indices, Gradients, Phase, PolicyParams, Scalar, StepFeatures};
use crate::rng::indexed_substream;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_init: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Fraction of each batch drawn from the replay buffer.
    pub replay_ratio: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 10,
            lr_init: 1e-4,
            weight_decay: 1e-2,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            replay_ratio: 0.5,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(config("epochs and batch_size must be at least 1"));
        }
        if !(self.lr_init >= 0.0 && self.lr_init.is_finite()) || !(self.weight_decay >= 0.0) {
            return Err(config("lr_init and weight_decay must be finite and non-negative"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.eps > 0.0) {
            return Err(config("betas must lie in [0, 1) and eps must be positive"));
        }
        if !(0.0..1.0).contains(&self.replay_ratio) {
            return Err(config(format!("replay_ratio must lie in [0, 1), got {}", self.replay_ratio)));
        }
        Ok(())
    }

    /// Replayed entries added to a batch of `batch_size` current windows so
    /// that they make up `replay_ratio` of the combined batch.
    pub fn replay_per_batch(&self) -> usize {
        (self.batch_size as f64 * self.replay_ratio / (1.0 - self.replay_ratio)).round() as usize
    }
}

/// `lr_init · (1 − step / total_steps)`.
pub fn learning_rate_at(step: usize, total_steps: usize, cfg: &TrainConfig) -> Result<f64> {
    if total_steps == 0 || step > total_steps {
        return Err(domain(format!("step {step} outside schedule of {total_steps} steps")));
    }
    Ok(cfg.lr_init * (1.0 - step as f64 / total_steps as f64))
}

/// Per-tensor first and second moments.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub t: u64,
    moments: Vec<(String, Vec<T>, Vec<T>)>,
}

impl<T: Scalar> Default for AdamState<T> {
    fn default() -> Self {
        Self { t: 0, moments: Vec::new() }
    }
}

impl<T: Scalar> AdamState<T> {
    pub fn moments(&self, name: &str) -> Option<(&[T], &[T])> {
        self.moments
            .iter()
            .find(|(n, _, _)| n == name)
            .map(|(_, m, v)| (m.as_slice(), v.as_slice()))
    }

    /// One AdamW update over `(name, params, grads)` tensors, computed in
    /// the parameter type. All gradients are checked before anything is
    /// modified.
    pub fn step<'a, I>(&mut self, tensors: I, lr: f64, cfg: &TrainConfig) -> Result<()>
    where
        I: IntoIterator<Item = (String, &'a mut Vec<T>, &'a Vec<T>)>,
        T: 'a,
    {
        let tensors: Vec<_> = tensors.into_iter().collect();
        for (name, p, g) in &tensors {
            if p.len() != g.len() {
                return Err(Error::Internal(format!("{name}: gradient length mismatch")));
            }
            if let Some(i) = g.iter().position(|v| !Into::<f64>::into(*v).is_finite()) {
                return Err(Error::Numerical {
                    block: name.clone(),
                    detail: format!("non-finite gradient at index {i}"),
                });
            }
        }
        self.t += 1;
        let bc1 = 1.0 - cfg.beta1.powi(self.t as i32);
        let bc2 = 1.0 - cfg.beta2.powi(self.t as i32);
        for (name, p, g) in tensors {
            let slot = match self.moments.iter().position(|(n, _, _)| *n == name) {
                Some(i) => i,
                None => {
                    self.moments.push((name, vec![T::zero(); p.len()], vec![T::zero(); p.len()]));
                    self.moments.len() - 1
                }
            };
            let (_, m, v) = &mut self.moments[slot];
            let f = T::from_f64_lossy;
            let (b1, b2, one) = (f(cfg.beta1), f(cfg.beta2), T::one());
            let (inv_bc1, inv_bc2) = (f(1.0 / bc1), f(1.0 / bc2));
            let (lr_t, eps, decay) = (f(lr), f(cfg.eps), f(lr * cfg.weight_decay));
            for (((p, &g), m), v) in p.iter_mut().zip(g.iter()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = b1 * *m + (one - b1) * g;
                *v = b2 * *v + (one - b2) * g * g;
                let update = lr_t * (*m * inv_bc1) / ((*v * inv_bc2).sqrt() + eps) + decay * *p;
                *p = *p - update;
            }
        }
        Ok(())
    }
}

/// Applies one AdamW step to the trainable blocks covered by `grads`.
pub fn optimizer_step<T: Scalar>(
    params: &mut PolicyParams<T>,
    grads: &Gradients<T>,
    state: &mut AdamState<T>,
    lr: f64,
    cfg: &TrainConfig,
) -> Result<()> {
    state.step(params.trainable_with_grads(grads), lr, cfg)
}

/// One row of the per-step training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub stage: usize,
    pub epoch: usize,
    pub step: usize,
    pub lr: f64,
    pub loss_bc: f64,
    pub loss_ifa: f64,
    pub loss_total: f64,
    pub buffer_bytes: u64,
}

/// Losses of one batch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ObjectiveValue {
    pub loss_bc: f64,
    pub loss_ifa: f64,
    pub loss_total: f64,
    pub active_pairs: usize,
}

/// Feature-adjustment inputs for the objective.
#[derive(Clone, Copy, Debug)]
pub struct IfaTerm<'a> {
    pub references: &'a ReferenceRegistry,
    pub pairs: &'a PairSet,
    pub cfg: &'a IfaConfig,
}

/// One optimization batch. Rows built from observation windows come first,
/// then rows given directly as stored latents.
#[derive(Clone, Debug)]
pub struct BatchInput<'a, T> {
    pub windows: Vec<Vec<&'a StepFeatures<T>>>,
    pub latents: Vec<&'a [T]>,
    /// One target per row.
    pub targets: Vec<&'a [f32]>,
    /// Task of each row that takes part in the hinge; `None` for replayed rows.
    pub ifa_tasks: Vec<Option<TaskId>>,
}

impl<T> BatchInput<'_, T> {
    pub fn rows(&self) -> usize {
        self.windows.len() + self.latents.len()
    }
}

/// `ℒ_BC + λ·ℒ_IFA` for one batch, accumulating its gradient into `grads`
/// when given. Encoder gradients are only propagated when `grads` covers
/// the state encoder or FiLM blocks.
pub fn batch_objective<T: Scalar>(
    params: &PolicyParams<T>,
    input: &BatchInput<'_, T>,
    ifa: Option<IfaTerm<'_>>,
    grads: Option<&mut Gradients<T>>,
) -> Result<ObjectiveValue> {
    let rows = input.rows();
    if rows == 0 || input.targets.len() != rows || input.ifa_tasks.len() != rows {
        return Err(domain("batch rows, targets and task tags must agree and be non-empty"));
    }
    let d_in = params.cfg.latent_shape().len();
    let mut x = Vec::with_capacity(rows * d_in);
    let mut caches = Vec::with_capacity(input.windows.len());
    for w in &input.windows {
        let (latent, cache) = params.encode_steps(w)?;
        x.extend_from_slice(&latent);
        caches.push(cache);
    }
    for l in &input.latents {
        if l.len() != d_in {
            return Err(domain(format!("stored latent has {} values, expected {d_in}", l.len())));
        }
        x.extend_from_slice(l);
    }
    let dec = params.forward_decoder(x, rows)?;
    let (loss_bc, d_out) = params.bc_loss_grad(&dec, &input.targets)?;

    let mut loss_ifa = 0.0;
    let mut active_pairs = 0;
    let mut d_global: Option<Vec<T>> = None;
    if let Some(term) = ifa {
        let tagged: Vec<(usize, TaskId)> = input
            .ifa_tasks
            .iter()
            .enumerate()
            .filter_map(|(i, t)| t.map(|t| (i, t)))
            .collect();
        if !term.pairs.is_empty() && !tagged.is_empty() {
            let globals: Vec<(&[T], TaskId)> = tagged.iter().map(|&(i, t)| (dec.global(i), t)).collect();
            let out = ifa_loss(&globals, term.references, term.pairs, term.cfg)?;
            loss_ifa = out.loss;
            active_pairs = out.active_pairs;
            if term.cfg.lambda_ifa != 0.0 && active_pairs > 0 {
                let e = params.cfg.embed;
                let mut dg = vec![T::zero(); dec.g.len()];
                for (&(i, _), g) in tagged.iter().zip(&out.grads) {
                    for (d, v) in dg[i * e..(i + 1) * e].iter_mut().zip(g) {
                        *d = T::from_f64_lossy(term.cfg.lambda_ifa * v);
                    }
                }
                d_global = Some(dg);
            }
        }
    }
    let lambda = ifa.map_or(0.0, |t| t.cfg.lambda_ifa);
    let value = ObjectiveValue {
        loss_bc,
        loss_ifa,
        loss_total: loss_bc + lambda * loss_ifa,
        active_pairs,
    };
    if !value.loss_total.is_finite() {
        return Err(Error::Numerical {
            block: "loss".into(),
            detail: format!("non-finite objective (bc {loss_bc}, ifa {loss_ifa})"),
        });
    }

    if let Some(grads) = grads {
        let train_encoder = grads.phase.trainable().iter().any(|l| {
            matches!(
                l,
                crate::policy::Layer::StateIn | crate::policy::Layer::FilmAgent | crate::policy::Layer::FilmState
            )
        });
        let want_dx = train_encoder && !input.windows.is_empty();
        let dx = params.backward_decoder(&dec, &d_out, d_global.as_deref(), grads, want_dx)?;
        if let Some(dx) = dx {
            for (r, (w, cache)) in input.windows.iter().zip(&caches).enumerate() {
                params.backward_encode(w, cache, &dx[r * d_in..(r + 1) * d_in], grads)?;
            }
        }
    }
    Ok(value)
}

/// Projected observations and actions of every demonstration of one task.
#[derive(Clone, Debug)]
pub struct TaskData {
    pub task_id: TaskId,
    pub trajectories: Vec<(Vec<StepFeatures<f32>>, Vec<Vec<f32>>)>,
}

impl TaskData {
    pub fn n_windows(&self) -> usize {
        self.trajectories.iter().map(|(s, _)| s.len()).sum()
    }

    /// `(trajectory, timestep)` of every window in order.
    pub fn window_ids(&self) -> Vec<(usize, usize)> {
        self.trajectories
            .iter()
            .enumerate()
            .flat_map(|(d, (s, _))| (0..s.len()).map(move |t| (d, t)))
            .collect()
    }

    pub fn window(&self, traj: usize, t: usize, window: usize) -> Vec<&StepFeatures<f32>> {
        let steps = &self.trajectories[traj].0;
        window_indices(t, window).into_iter().map(|i| &steps[i]).collect()
    }

    pub fn action(&self, traj: usize, t: usize) -> &[f32] {
        &self.trajectories[traj].1[t]
    }
}

/// Runs every demonstration of `task` through the fixed vision projections.
pub fn prepare_task(params: &PolicyParams<f32>, suite: &Suite, task: TaskId) -> Result<TaskData> {
    let mut trajectories = Vec::new();
    for demo in suite.demonstrations(task) {
        let steps = demo
            .states
            .iter()
            .map(|s| params.project_step(&suite.observation(task, s)?))
            .collect::<Result<Vec<_>>>()?;
        trajectories.push((steps, demo.actions.clone()));
    }
    if trajectories.is_empty() {
        return Err(config(format!("task {task} has no demonstrations")));
    }
    Ok(TaskData {
        task_id: task,
        trajectories,
    })
}

/// Mean behavior-cloning loss over every window of `data`.
pub fn dataset_bc_loss(params: &PolicyParams<f32>, data: &[TaskData]) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0usize;
    for task in data {
        for (d, t) in task.window_ids() {
            let input = BatchInput {
                windows: vec![task.window(d, t, params.cfg.window)],
                latents: Vec::new(),
                targets: vec![task.action(d, t)],
                ifa_tasks: vec![None],
            };
            total += batch_objective(params, &input, None, None)?.loss_bc;
            count += 1;
        }
    }
    if count == 0 {
        return Err(config("no windows to evaluate"));
    }
    Ok(total / count as f64)
}

fn check_step(stage: usize, step: usize, v: &ObjectiveValue) -> Result<()> {
    if !v.loss_total.is_finite() {
        return Err(Error::Numerical {
            block: format!("stage {stage} step {step}"),
            detail: "non-finite loss".into(),
        });
    }
    Ok(())
}

fn tag_step(stage: usize, step: usize) -> impl Fn(Error) -> Error {
    move |e| match e {
        Error::Numerical { block, detail } => Error::Numerical {
            block: format!("stage {stage} step {step}: {block}"),
            detail,
        },
        other => other,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainReport {
    pub steps: usize,
    pub initial_loss: f64,
    pub final_loss: f64,
    pub frozen_hash: String,
    /// Not serialized, so persisted reports stay reproducible.
    #[serde(skip)]
    pub wall_time_s: f64,
}

/// Stage index used in pretraining logs.
pub const PRETRAIN_STAGE: usize = 0;

/// Trains every non-backbone block on the pooled base-task demonstrations.
/// Initial and final losses are measured over the whole pooled dataset.
pub fn pretrain(
    suite: &Suite,
    params: &mut PolicyParams<f32>,
    cfg: &TrainConfig,
    log: &mut dyn FnMut(&StepRecord),
) -> Result<PretrainReport> {
    cfg.validate()?;
    let tasks = suite.base_tasks();
    if tasks.is_empty() {
        return Err(config("pretraining needs at least one base task"));
    }
    let start = Instant::now();
    let data = tasks
        .iter()
        .map(|&t| prepare_task(params, suite, t))
        .collect::<Result<Vec<_>>>()?;
    let pool: Vec<(usize, usize, usize)> = data
        .iter()
        .enumerate()
        .flat_map(|(i, d)| d.window_ids().into_iter().map(move |(tr, t)| (i, tr, t)))
        .collect();
    let initial_loss = dataset_bc_loss(params, &data)?;
    let steps_per_epoch = pool.len().div_ceil(cfg.batch_size);
    let total = cfg.epochs * steps_per_epoch;
    let mut rng = indexed_substream(cfg.seed, "shuffle", PRETRAIN_STAGE as u64);
    let mut adam = AdamState::default();
    let mut order = pool.clone();
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let input = BatchInput {
                windows: chunk.iter().map(|&(i, tr, t)| data[i].window(tr, t, params.cfg.window)).collect(),
                latents: Vec::new(),
                targets: chunk.iter().map(|&(i, tr, t)| data[i].action(tr, t)).collect(),
                ifa_tasks: vec![None; chunk.len()],
            };
            let mut grads = Gradients::zeros(params, Phase::Pretrain);
            let value = batch_objective(params, &input, None, Some(&mut grads)).map_err(tag_step(PRETRAIN_STAGE, step))?;
            check_step(PRETRAIN_STAGE, step, &value)?;
            let lr = learning_rate_at(step, total, cfg)?;
            optimizer_step(params, &grads, &mut adam, lr, cfg).map_err(tag_step(PRETRAIN_STAGE, step))?;
            log(&StepRecord {
                stage: PRETRAIN_STAGE,
                epoch,
                step,
                lr,
                loss_bc: value.loss_bc,
                loss_ifa: 0.0,
                loss_total: value.loss_total,
                buffer_bytes: 0,
            });
            step += 1;
        }
    }
    let final_loss = dataset_bc_loss(params, &data)?;
    Ok(PretrainReport {
        steps: step,
        initial_loss,
        final_loss,
        frozen_hash: params.frozen_hash(),
        wall_time_s: start.elapsed().as_secs_f64(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageReport {
    pub stage_index: usize,
    pub tasks_introduced: Vec<TaskId>,
    /// Mean losses over the final epoch.
    pub final_loss_bc: f64,
    pub final_loss_ifa: f64,
    pub pairs: Vec<(TaskId, TaskId)>,
    pub buffer: Option<MemoryStats>,
    /// Not serialized, so persisted reports stay reproducible.
    #[serde(skip)]
    pub wall_time_s: f64,
    pub steps: usize,
    /// Latent windows offered to the buffer after training.
    pub offered: usize,
}

/// Inputs of one lifelong stage beyond the parameters and buffer.
#[derive(Clone, Copy, Debug)]
pub struct StageSpec<'a> {
    /// 1-based stage index, used for logging and RNG streams.
    pub stage_index: usize,
    pub tasks: &'a [TaskId],
    /// Lifelong tasks introduced in earlier stages.
    pub old_tasks: &'a [TaskId],
}

/// Agent-view latents (last window step) of stored entries per task.
fn buffer_agent_views(buffer: &ReplayBuffer, tasks: &[TaskId]) -> Result<BTreeMap<TaskId, Vec<Embedding>>> {
    let mut out = BTreeMap::new();
    for &t in tasks {
        let entries = buffer.entries(t);
        if entries.is_empty() {
            continue;
        }
        let views = entries
            .iter()
            .map(|e| Embedding::new(e.latent.row(AGENT_VIEW, e.latent.shape().window - 1).to_vec()))
            .collect::<Result<Vec<_>>>()?;
        out.insert(t, views);
    }
    Ok(out)
}

/// Trains one lifelong stage. References for the stage's tasks must already
/// be registered. The pair set is computed once before the first step from
/// stage-start latents; only old tasks with stored latents enter the ranking.
#[allow(clippy::too_many_arguments)]
pub fn lifelong_stage(
    spec: StageSpec<'_>,
    suite: &Suite,
    params: &mut PolicyParams<f32>,
    mut buffer: Option<&mut ReplayBuffer>,
    references: &ReferenceRegistry,
    cfg: &TrainConfig,
    ifa_cfg: &IfaConfig,
    log: &mut dyn FnMut(&StepRecord),
) -> Result<StageReport> {
    cfg.validate()?;
    ifa_cfg.validate()?;
    if spec.tasks.is_empty() {
        return Err(config("stage has no tasks"));
    }
    let start = Instant::now();
    let stage = spec.stage_index;
    let window = params.cfg.window;
    let shape = params.cfg.latent_shape();
    let data = spec
        .tasks
        .iter()
        .map(|&t| prepare_task(params, suite, t))
        .collect::<Result<Vec<_>>>()?;

    // encoders are frozen, so stage latents are fixed for the whole stage
    let mut current: Vec<(LatentSequence, &[f32])> = Vec::new();
    for task in &data {
        for (d, t) in task.window_ids() {
            let (latent, _) = params.encode_steps(&task.window(d, t, window))?;
            current.push((LatentSequence::new(shape, latent, task.task_id, t)?, task.action(d, t)));
        }
    }

    let mut latents: BTreeMap<TaskId, TaskLatents> = BTreeMap::new();
    let old_views = match buffer.as_deref() {
        Some(b) => buffer_agent_views(b, spec.old_tasks)?,
        None => BTreeMap::new(),
    };
    for (&t, views) in &old_views {
        latents.insert(
            t,
            TaskLatents {
                agent_view: views.clone(),
                language: vec![references.get(t)?.h_ref.clone()],
            },
        );
    }
    for &t in spec.tasks {
        let views = current
            .iter()
            .filter(|(l, _)| l.task_id == t)
            .map(|(l, _)| Embedding::new(l.row(AGENT_VIEW, window - 1).to_vec()))
            .collect::<Result<Vec<_>>>()?;
        latents.insert(
            t,
            TaskLatents {
                agent_view: views,
                language: vec![references.get(t)?.h_ref.clone()],
            },
        );
    }
    let old: BTreeSet<TaskId> = old_views.keys().copied().collect();
    let new: BTreeSet<TaskId> = spec.tasks.iter().copied().collect();
    let pairs = select_pairs(&old, &new, &latents, ifa_cfg.selection_fraction)?;
    let ifa_term = IfaTerm {
        references,
        pairs: &pairs,
        cfg: ifa_cfg,
    };

    let n_replay = cfg.replay_per_batch();
    let steps_per_epoch = current.len().div_ceil(cfg.batch_size);
    let total = cfg.epochs * steps_per_epoch;
    let mut shuffle_rng = indexed_substream(cfg.seed, "shuffle", stage as u64);
    let mut replay_rng = indexed_substream(cfg.seed, "replay", stage as u64);
    let mut adam = AdamState::default();
    let mut order: Vec<usize> = (0..current.len()).collect();
    let buffer_bytes = buffer.as_deref().map_or(0, |b| b.memory_stats().total_bytes_latent);
    let mut step = 0;
    let (mut last_bc, mut last_ifa) = (0.0, 0.0);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut shuffle_rng);
        let (mut sum_bc, mut sum_ifa, mut n) = (0.0, 0.0, 0usize);
        for chunk in order.chunks(cfg.batch_size) {
            let replay: Vec<&BufferEntry> = match buffer.as_deref() {
                Some(b) if n_replay > 0 && !b.is_empty() => b.sample_replay_batch(n_replay, &mut replay_rng),
                _ => Vec::new(),
            };
            let input = BatchInput {
                windows: Vec::new(),
                latents: chunk
                    .iter()
                    .map(|&i| current[i].0.data())
                    .chain(replay.iter().map(|e| e.latent.data()))
                    .collect(),
                targets: chunk
                    .iter()
                    .map(|&i| current[i].1)
                    .chain(replay.iter().map(|e| e.action.as_slice()))
                    .collect(),
                ifa_tasks: chunk
                    .iter()
                    .map(|&i| Some(current[i].0.task_id))
                    .chain(replay.iter().map(|_| None))
                    .collect(),
            };
            let mut grads = Gradients::zeros(params, Phase::Lifelong);
            let value = batch_objective(params, &input, Some(ifa_term), Some(&mut grads)).map_err(tag_step(stage, step))?;
            check_step(stage, step, &value)?;
            let lr = learning_rate_at(step, total, cfg)?;
            optimizer_step(params, &grads, &mut adam, lr, cfg).map_err(tag_step(stage, step))?;
            log(&StepRecord {
                stage,
                epoch,
                step,
                lr,
                loss_bc: value.loss_bc,
                loss_ifa: value.loss_ifa,
                loss_total: value.loss_total,
                buffer_bytes,
            });
            sum_bc += value.loss_bc;
            sum_ifa += value.loss_ifa;
            n += 1;
            step += 1;
        }
        last_bc = sum_bc / n as f64;
        last_ifa = sum_ifa / n as f64;
    }

    let mut offered = 0;
    if let Some(b) = buffer.as_deref_mut() {
        for (latent, action) in current {
            let task_id = latent.task_id;
            b.offer(BufferEntry {
                latent,
                action: action.to_vec(),
                task_id,
            })?;
            offered += 1;
        }
    }
    Ok(StageReport {
        stage_index: stage,
        tasks_introduced: spec.tasks.to_vec(),
        final_loss_bc: last_bc,
        final_loss_ifa: last_ifa,
        pairs: pairs.iter().collect(),
        buffer: buffer.as_deref().map(ReplayBuffer::memory_stats),
        wall_time_s: start.elapsed().as_secs_f64(),
        steps: step,
        offered,
    })
}

/// Global latents of stored entries, used by diagnostics.
pub fn stored_globals(params: &PolicyParams<f32>, entries: &[BufferEntry]) -> Result<Vec<Vec<f32>>> {
    entries
        .iter()
        .map(|e| params.global_latent(&e.latent).map(|g| cast_vec(&g)))
        .collect()
}
