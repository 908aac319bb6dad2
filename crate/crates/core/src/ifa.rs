//! Incremental feature adjustment: task references, similarity-based pair
//! selection and the adaptive-margin hinge loss on global latents.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{config, domain, Result};
use crate::geometry::{self, cosine_similarity, DistanceMode, Embedding};

pub type TaskId = usize;

/// Maximum latents per task and modality entering a similarity estimate.
pub const SIMILARITY_CAP: usize = 256;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskReference {
    pub task_id: TaskId,
    /// Unit-norm language embedding of the task.
    pub h_ref: Embedding,
    pub introduced_at_stage: usize,
}

/// Append-only map from task id to its fixed reference embedding.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct ReferenceRegistry {
    refs: BTreeMap<TaskId, TaskReference>,
}

impl ReferenceRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers `language` (normalized) as the reference of `task_id`.
    /// A task can only be registered once.
    pub fn register(&mut self, task_id: TaskId, language: &Embedding, stage: usize) -> Result<&TaskReference> {
        if self.refs.contains_key(&task_id) {
            return Err(domain(format!("task {task_id} already has a reference")));
        }
        if let Some(existing) = self.refs.values().next() {
            if existing.h_ref.dim() != language.dim() {
                return Err(domain(format!(
                    "reference dimension {} does not match registry dimension {}",
                    language.dim(),
                    existing.h_ref.dim()
                )));
            }
        }
        let reference = TaskReference {
            task_id,
            h_ref: language.normalized()?,
            introduced_at_stage: stage,
        };
        Ok(self.refs.entry(task_id).or_insert(reference))
    }

    pub fn get(&self, task_id: TaskId) -> Result<&TaskReference> {
        self.refs
            .get(&task_id)
            .ok_or_else(|| domain(format!("task {task_id} has no registered reference")))
    }

    pub fn contains(&self, task_id: TaskId) -> bool {
        self.refs.contains_key(&task_id)
    }

    pub fn len(&self) -> usize {
        self.refs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.refs.is_empty()
    }

    /// References in ascending task-id order.
    pub fn iter(&self) -> impl Iterator<Item = &TaskReference> {
        self.refs.values()
    }
}

/// Ordered `(old, new)` task pairs constrained by the hinge loss.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairSet {
    pairs: BTreeSet<(TaskId, TaskId)>,
}

impl PairSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, old: TaskId, new: TaskId) {
        self.pairs.insert((old, new));
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn contains(&self, old: TaskId, new: TaskId) -> bool {
        self.pairs.contains(&(old, new))
    }

    pub fn iter(&self) -> impl Iterator<Item = (TaskId, TaskId)> + '_ {
        self.pairs.iter().copied()
    }
}

impl FromIterator<(TaskId, TaskId)> for PairSet {
    fn from_iter<I: IntoIterator<Item = (TaskId, TaskId)>>(iter: I) -> Self {
        Self {
            pairs: iter.into_iter().collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IfaConfig {
    /// Angular scaling factor of the adaptive margin.
    pub alpha: f64,
    pub lambda_ifa: f64,
    /// Fraction of the most similar pairs kept in each modality ranking.
    pub selection_fraction: f64,
    pub distance_mode: DistanceMode,
}

impl Default for IfaConfig {
    fn default() -> Self {
        Self {
            alpha: 0.3,
            lambda_ifa: 0.1,
            selection_fraction: 0.5,
            distance_mode: DistanceMode::Angle,
        }
    }
}

impl IfaConfig {
    pub fn validate(&self) -> Result<()> {
        geometry::check_alpha(self.alpha)?;
        if !(self.lambda_ifa >= 0.0 && self.lambda_ifa.is_finite()) {
            return Err(config(format!("lambda_ifa must be >= 0, got {}", self.lambda_ifa)));
        }
        if !(self.selection_fraction > 0.0 && self.selection_fraction <= 1.0) {
            return Err(config(format!(
                "selection_fraction must lie in (0, 1], got {}",
                self.selection_fraction
            )));
        }
        Ok(())
    }
}

/// Per-task latents used to rank task pairs.
#[derive(Clone, Debug, Default)]
pub struct TaskLatents {
    pub agent_view: Vec<Embedding>,
    pub language: Vec<Embedding>,
}

/// Mean cosine similarity over the full cross product of two latent sets.
pub fn modality_similarity(a: &[Embedding], b: &[Embedding]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(domain("modality similarity needs non-empty latent lists"));
    }
    let mut total = 0.0;
    for x in a {
        for y in b {
            total += cosine_similarity(x.as_slice(), y.as_slice())?;
        }
    }
    Ok(total / (a.len() * b.len()) as f64)
}

/// Deterministic strided subsample of at most `cap` items; the stride
/// offset is chosen by `seed`.
pub fn strided_subsample<T: Clone>(items: &[T], cap: usize, seed: u64) -> Vec<T> {
    if items.len() <= cap || cap == 0 {
        return if cap == 0 { Vec::new() } else { items.to_vec() };
    }
    let stride = items.len() / cap;
    let offset = (seed % stride as u64) as usize;
    (0..cap).map(|i| items[offset + i * stride].clone()).collect()
}

fn top_pairs(scored: &[((TaskId, TaskId), f64)], keep: usize) -> BTreeSet<(TaskId, TaskId)> {
    let mut ranked: Vec<_> = scored.to_vec();
    ranked.sort_by(|(pa, sa), (pb, sb)| sb.total_cmp(sa).then(pa.cmp(pb)));
    ranked.into_iter().take(keep).map(|(p, _)| p).collect()
}

/// Selects the old/new task pairs that rank in the top `fraction` of all
/// pairs by both agent-view and language similarity.
///
/// The ranking pool is every unordered pair of tasks in `old ∪ new`; the
/// cutoff keeps `⌈fraction · P⌉` pairs with ties broken by task id. Pairs
/// are returned as `(old, new)`.
pub fn select_pairs(
    old: &BTreeSet<TaskId>,
    new: &BTreeSet<TaskId>,
    latents: &BTreeMap<TaskId, TaskLatents>,
    fraction: f64,
) -> Result<PairSet> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(config(format!("selection fraction must lie in (0, 1], got {fraction}")));
    }
    if let Some(t) = old.intersection(new).next() {
        return Err(domain(format!("task {t} is both old and new")));
    }
    if old.is_empty() || new.is_empty() {
        return Ok(PairSet::new());
    }
    let tasks: Vec<TaskId> = old.union(new).copied().collect();
    for t in &tasks {
        let l = latents
            .get(t)
            .ok_or_else(|| domain(format!("no latents for task {t}")))?;
        if l.agent_view.is_empty() || l.language.is_empty() {
            return Err(domain(format!("task {t} is missing agent-view or language latents")));
        }
    }
    let mut agent = Vec::new();
    let mut language = Vec::new();
    for (i, &a) in tasks.iter().enumerate() {
        for &b in &tasks[i + 1..] {
            let (la, lb) = (&latents[&a], &latents[&b]);
            agent.push(((a, b), modality_similarity(&la.agent_view, &lb.agent_view)?));
            language.push(((a, b), modality_similarity(&la.language, &lb.language)?));
        }
    }
    let keep = (fraction * agent.len() as f64).ceil() as usize;
    let top_agent = top_pairs(&agent, keep);
    let top_language = top_pairs(&language, keep);
    Ok(top_agent
        .intersection(&top_language)
        .filter_map(|&(a, b)| match (old.contains(&a), old.contains(&b)) {
            (true, false) => Some((a, b)),
            (false, true) => Some((b, a)),
            _ => None,
        })
        .collect())
}

/// Hinge loss value and its gradient with respect to each input global.
#[derive(Clone, Debug, PartialEq)]
pub struct IfaOutput {
    pub loss: f64,
    pub grads: Vec<Vec<f64>>,
    /// Pairs whose new task had at least one sample in the batch.
    pub active_pairs: usize,
}

/// Feature-adjustment loss over the current-task globals of one batch.
///
/// Each pair `(j, k)` contributes the mean over the batch's globals of task
/// `k` of `max(0, d(g, h_k) - d(g, h_j) + α·d(h_k, h_j))`; the loss is the
/// mean over pairs that have at least one such global. The loss is not
/// multiplied by `lambda_ifa`.
pub fn ifa_loss<T, G>(
    globals: &[(G, TaskId)],
    references: &ReferenceRegistry,
    pairs: &PairSet,
    cfg: &IfaConfig,
) -> Result<IfaOutput>
where
    T: Copy + Into<f64>,
    G: AsRef<[T]>,
{
    cfg.validate()?;
    for (_, task) in globals {
        references.get(*task)?;
    }
    let mut grads: Vec<Vec<f64>> = globals.iter().map(|(g, _)| vec![0.0; g.as_ref().len()]).collect();
    let mut total = 0.0;
    let mut active_pairs = 0usize;
    // per-pair terms are accumulated with their own 1/|S_k| weight, then the
    // whole thing is rescaled by 1/|active pairs|
    for (j, k) in pairs.iter() {
        let h_j = references.get(j)?.h_ref.as_slice();
        let h_k = references.get(k)?.h_ref.as_slice();
        let members: Vec<usize> = globals
            .iter()
            .enumerate()
            .filter(|(_, (_, t))| *t == k)
            .map(|(i, _)| i)
            .collect();
        if members.is_empty() {
            continue;
        }
        active_pairs += 1;
        let margin = geometry::adaptive_margin_with(cfg.distance_mode, h_k, h_j, cfg.alpha)?;
        let weight = 1.0 / members.len() as f64;
        let mut term = 0.0;
        for i in members {
            let g = globals[i].0.as_ref();
            let (d_own, grad_own) = geometry::distance_with_grad(cfg.distance_mode, g, h_k)?;
            let (d_other, grad_other) = geometry::distance_with_grad(cfg.distance_mode, g, h_j)?;
            let hinge = d_own - d_other + margin;
            if hinge > 0.0 {
                term += hinge;
                for ((acc, go), gt) in grads[i].iter_mut().zip(&grad_own).zip(&grad_other) {
                    *acc += weight * (go - gt);
                }
            }
        }
        total += term * weight;
    }
    if active_pairs == 0 {
        return Ok(IfaOutput {
            loss: 0.0,
            grads,
            active_pairs,
        });
    }
    let scale = 1.0 / active_pairs as f64;
    for g in &mut grads {
        g.iter_mut().for_each(|v| *v *= scale);
    }
    Ok(IfaOutput {
        loss: total * scale,
        grads,
        active_pairs,
    })
}
