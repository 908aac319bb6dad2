//! Synthetic multimodal task suites, closed-loop policy evaluation and the
//! lifelong-learning metrics.
//!
//! Each task is a linear expert `a = W_task [c_task; s]` over a hidden context
//! `c_task` and the proprioceptive state `s`. Contexts interpolate between a
//! shared anchor and a task-private direction, so a single similarity knob
//! controls how alike tasks look in every modality: language embeddings are an
//! isometric image of the context, and the two camera views are smooth
//! low-frequency fields whose coefficients are linear in context and state.

mod metrics;

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

pub use metrics::{lifelong_metrics, LifelongMetrics, SuccessMatrix};

use crate::error::{config, domain, Result};
use crate::geometry::{cosine_similarity, Embedding};
use crate::ifa::{ReferenceRegistry, TaskId};
use crate::policy::{cast_vec, window_indices, Observation, PolicyConfig, PolicyParams, StepFeatures};
use crate::rng::{indexed_substream, substream};

/// Low-frequency cosine modes per image axis.
const IMAGE_MODES: usize = 4;
const STATE_DECAY: f64 = 0.9;
const CONTROL_GAIN: f64 = 0.2;
const STATE_WEIGHT: f64 = 0.5;
/// Success band as a fraction of the task's expert action RMS.
pub const SUCCESS_FRACTION: f64 = 0.1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SuiteConfig {
    pub n_base: usize,
    pub n_lifelong: usize,
    pub tasks_per_stage: usize,
    pub similarity_knob: f64,
    pub demos_base: usize,
    pub demos_lifelong: usize,
    pub trajectory_len: usize,
    /// Dimension of the hidden task context; must exceed the task count and
    /// not exceed the embedding dimension.
    pub context_dim: usize,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        Self {
            n_base: 4,
            n_lifelong: 8,
            tasks_per_stage: 1,
            similarity_knob: 0.6,
            demos_base: 50,
            demos_lifelong: 10,
            trajectory_len: 40,
            context_dim: 32,
        }
    }
}

impl SuiteConfig {
    pub fn n_tasks(&self) -> usize {
        self.n_base + self.n_lifelong
    }

    pub fn validate(&self, policy: &PolicyConfig) -> Result<()> {
        if self.n_base == 0 || self.n_lifelong == 0 || self.tasks_per_stage == 0 {
            return Err(config("suite needs at least one base task, one lifelong task and one task per stage"));
        }
        if self.demos_base == 0 || self.demos_lifelong == 0 || self.trajectory_len == 0 {
            return Err(config("demonstration counts and trajectory length must be positive"));
        }
        if !(0.0..=1.0).contains(&self.similarity_knob) {
            return Err(config(format!("similarity_knob must lie in [0, 1], got {}", self.similarity_knob)));
        }
        if self.context_dim <= self.n_tasks() {
            return Err(config(format!(
                "context_dim {} must exceed the task count {}",
                self.context_dim,
                self.n_tasks()
            )));
        }
        if self.context_dim > policy.embed {
            return Err(config(format!(
                "context_dim {} must not exceed the embedding dimension {}",
                self.context_dim, policy.embed
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub task_id: TaskId,
    /// Unit-norm hidden context.
    pub context: Vec<f32>,
    /// `A × (C + S)` expert map, row-major.
    pub dynamics: Vec<f32>,
    pub language_embedding: Embedding,
    pub similarity_knob: f64,
    /// Mean per-step action error below which a rollout counts as a success.
    pub success_threshold: f64,
    pub is_base: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Demonstration {
    pub task_id: TaskId,
    pub states: Vec<Vec<f32>>,
    pub actions: Vec<Vec<f32>>,
}

/// Shared rendering and state-transition parameters of a suite.
#[derive(Clone, Debug, PartialEq)]
struct World {
    /// `IMAGE_MODES² × V²` smooth image basis.
    basis: Vec<Vec<f64>>,
    /// `IMAGE_MODES² × (C + S)` coefficient maps per camera.
    agent_map: Vec<f64>,
    eye_map: Vec<f64>,
    /// `S × S` transition and `S × A` control matrices.
    transition: Vec<f64>,
    control: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Suite {
    pub cfg: SuiteConfig,
    pub policy: PolicyConfig,
    pub tasks: Vec<TaskSpec>,
    /// Lifelong task ids grouped by stage.
    pub stages: Vec<Vec<TaskId>>,
    demos: Vec<Vec<Demonstration>>,
    world: World,
}

fn normal_vec<R: Rng + ?Sized>(rng: &mut R, n: usize, std: f64) -> Vec<f64> {
    (0..n).map(|_| rng.sample::<f64, _>(StandardNormal) * std).collect()
}

fn dot64(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Random unit vector orthogonal to every vector in `basis` (assumed orthonormal).
fn orthonormal_draw<R: Rng + ?Sized>(rng: &mut R, dim: usize, basis: &[Vec<f64>]) -> Vec<f64> {
    loop {
        let mut v = normal_vec(rng, dim, 1.0);
        // two passes of Gram-Schmidt for numerical orthogonality
        for _ in 0..2 {
            for b in basis {
                let p = dot64(&v, b);
                v.iter_mut().zip(b).for_each(|(x, y)| *x -= p * y);
            }
        }
        let n = dot64(&v, &v).sqrt();
        if n > 1e-6 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

fn matvec(m: &[f64], rows: usize, x: &[f64]) -> Vec<f64> {
    let cols = x.len();
    (0..rows).map(|r| dot64(&m[r * cols..(r + 1) * cols], x)).collect()
}

/// Generates a deterministic suite: base tasks first, then lifelong tasks
/// grouped into stages.
pub fn generate_suite(cfg: &SuiteConfig, policy: &PolicyConfig, seed: u64) -> Result<Suite> {
    cfg.validate(policy)?;
    let mut rng = substream(seed, "suite");
    let (c_dim, s_dim, a_dim, e_dim) = (cfg.context_dim, policy.state_dim, policy.action_dim, policy.embed);
    let knob = cfg.similarity_knob;
    let fresh_weight = (1.0 - knob * knob).max(0.0).sqrt();

    let anchor = orthonormal_draw(&mut rng, c_dim, &[]);
    let mut used = vec![anchor.clone()];
    // isometry from context space into the embedding space
    let mut lang_cols: Vec<Vec<f64>> = Vec::with_capacity(c_dim);
    for _ in 0..c_dim {
        let col = orthonormal_draw(&mut rng, e_dim, &lang_cols);
        lang_cols.push(col);
    }

    let in_dim = c_dim + s_dim;
    let dyn_std: Vec<f64> = (0..in_dim)
        .map(|i| if i < c_dim { 1.0 } else { STATE_WEIGHT / (s_dim as f64).sqrt() })
        .collect();
    let draw_dynamics = |rng: &mut dyn rand::RngCore| -> Vec<f64> {
        (0..a_dim * in_dim)
            .map(|i| rng.sample::<f64, _>(StandardNormal) * dyn_std[i % in_dim])
            .collect()
    };
    let dyn_anchor = draw_dynamics(&mut rng);

    let n_modes = IMAGE_MODES * IMAGE_MODES;
    let v = policy.view;
    let basis = (0..n_modes)
        .map(|k| {
            let (p, q) = ((k / IMAGE_MODES) as f64, (k % IMAGE_MODES) as f64);
            (0..v * v)
                .map(|idx| {
                    let (x, y) = ((idx / v) as f64 + 0.5, (idx % v) as f64 + 0.5);
                    (std::f64::consts::PI * p * x / v as f64).cos() * (std::f64::consts::PI * q * y / v as f64).cos()
                })
                .collect()
        })
        .collect();
    let camera_map = |rng: &mut dyn rand::RngCore, ctx_std: f64, state_std: f64| -> Vec<f64> {
        (0..n_modes * in_dim)
            .map(|i| {
                let std = if i % in_dim < c_dim { ctx_std } else { state_std };
                rng.sample::<f64, _>(StandardNormal) * std
            })
            .collect()
    };
    let agent_map = camera_map(&mut rng, 1.0, 0.3);
    let eye_map = camera_map(&mut rng, 0.5, 1.0);
    let mut rot: Vec<Vec<f64>> = Vec::with_capacity(s_dim);
    for _ in 0..s_dim {
        let r = orthonormal_draw(&mut rng, s_dim, &rot);
        rot.push(r);
    }
    let transition = rot.into_iter().flatten().map(|x| STATE_DECAY * x).collect();
    let control = normal_vec(&mut rng, s_dim * a_dim, CONTROL_GAIN / (a_dim as f64).sqrt());
    let world = World {
        basis,
        agent_map,
        eye_map,
        transition,
        control,
    };

    let mut tasks = Vec::with_capacity(cfg.n_tasks());
    for task_id in 0..cfg.n_tasks() {
        let fresh = orthonormal_draw(&mut rng, c_dim, &used);
        used.push(fresh.clone());
        let context: Vec<f64> = anchor.iter().zip(&fresh).map(|(a, f)| knob * a + fresh_weight * f).collect();
        let dyn_fresh = draw_dynamics(&mut rng);
        let dynamics: Vec<f32> = dyn_anchor
            .iter()
            .zip(&dyn_fresh)
            .map(|(a, f)| (knob * a + fresh_weight * f) as f32)
            .collect();
        let language: Vec<f32> = (0..e_dim)
            .map(|r| (0..c_dim).map(|c| lang_cols[c][r] * context[c]).sum::<f64>() as f32)
            .collect();
        tasks.push(TaskSpec {
            task_id,
            context: context.iter().map(|&x| x as f32).collect(),
            dynamics,
            language_embedding: Embedding::new(language)?,
            similarity_knob: knob,
            success_threshold: 0.0,
            is_base: task_id < cfg.n_base,
        });
    }

    let stages = (cfg.n_base..cfg.n_tasks())
        .collect::<Vec<_>>()
        .chunks(cfg.tasks_per_stage)
        .map(<[TaskId]>::to_vec)
        .collect();
    let mut suite = Suite {
        cfg: cfg.clone(),
        policy: policy.clone(),
        tasks,
        stages,
        demos: Vec::new(),
        world,
    };

    let mut demos = Vec::with_capacity(cfg.n_tasks());
    for task in 0..cfg.n_tasks() {
        let n = if task < cfg.n_base { cfg.demos_base } else { cfg.demos_lifelong };
        let task_demos: Vec<Demonstration> = (0..n)
            .map(|_| {
                let s0: Vec<f32> = normal_vec(&mut rng, s_dim, 1.0).into_iter().map(|x| x as f32).collect();
                suite.expert_rollout(task, s0)
            })
            .collect();
        let (sum_sq, count) = task_demos
            .iter()
            .flat_map(|d| &d.actions)
            .fold((0.0, 0usize), |(s, c), a| (s + a.iter().map(|&x| (x as f64).powi(2)).sum::<f64>(), c + 1));
        suite.tasks[task].success_threshold = SUCCESS_FRACTION * (sum_sq / count as f64).sqrt();
        demos.push(task_demos);
    }
    suite.demos = demos;
    Ok(suite)
}

impl Suite {
    pub fn task(&self, id: TaskId) -> Result<&TaskSpec> {
        self.tasks.get(id).ok_or_else(|| domain(format!("unknown task {id}")))
    }

    pub fn base_tasks(&self) -> Vec<TaskId> {
        (0..self.cfg.n_base).collect()
    }

    pub fn lifelong_tasks(&self) -> Vec<TaskId> {
        (self.cfg.n_base..self.cfg.n_tasks()).collect()
    }

    pub fn demonstrations(&self, id: TaskId) -> &[Demonstration] {
        self.demos.get(id).map(Vec::as_slice).unwrap_or(&[])
    }

    /// Language embeddings indexed by task id, as fed to the policy's table.
    pub fn language_table(&self) -> Vec<Embedding> {
        self.tasks.iter().map(|t| t.language_embedding.clone()).collect()
    }

    fn features(&self, task: &TaskSpec, state: &[f32]) -> Vec<f64> {
        task.context.iter().chain(state).map(|&x| x as f64).collect()
    }

    pub fn expert_action(&self, task: TaskId, state: &[f32]) -> Result<Vec<f32>> {
        let spec = self.task(task)?;
        if state.len() != self.policy.state_dim {
            return Err(domain("state has the wrong dimension"));
        }
        let w: Vec<f64> = spec.dynamics.iter().map(|&x| x as f64).collect();
        Ok(matvec(&w, self.policy.action_dim, &self.features(spec, state))
            .into_iter()
            .map(|x| x as f32)
            .collect())
    }

    /// `s' = R s + B a`.
    pub fn next_state(&self, state: &[f32], action: &[f64]) -> Vec<f32> {
        let s: Vec<f64> = state.iter().map(|&x| x as f64).collect();
        let rs = matvec(&self.world.transition, s.len(), &s);
        let ba = matvec(&self.world.control, s.len(), action);
        rs.iter().zip(&ba).map(|(x, y)| (x + y) as f32).collect()
    }

    pub fn observation(&self, task: TaskId, state: &[f32]) -> Result<Observation> {
        let spec = self.task(task)?;
        let feats = self.features(spec, state);
        let n_modes = self.world.basis.len();
        let render = |map: &[f64]| -> Vec<f32> {
            let coeffs = matvec(map, n_modes, &feats);
            let mut img = vec![0.0f64; self.policy.view * self.policy.view];
            for (c, b) in coeffs.iter().zip(&self.world.basis) {
                img.iter_mut().zip(b).for_each(|(p, v)| *p += c * v);
            }
            img.into_iter().map(|x| x as f32).collect()
        };
        Ok(Observation {
            agent_view: render(&self.world.agent_map),
            eye_in_hand: render(&self.world.eye_map),
            state: state.to_vec(),
            task_language_id: task,
        })
    }

    fn expert_rollout(&self, task: TaskId, s0: Vec<f32>) -> Demonstration {
        let mut states = Vec::with_capacity(self.cfg.trajectory_len);
        let mut actions = Vec::with_capacity(self.cfg.trajectory_len);
        let mut s = s0;
        for _ in 0..self.cfg.trajectory_len {
            let a = self.expert_action(task, &s).expect("task and state are valid");
            let a64: Vec<f64> = a.iter().map(|&x| x as f64).collect();
            let next = self.next_state(&s, &a64);
            states.push(s);
            actions.push(a);
            s = next;
        }
        Demonstration {
            task_id: task,
            states,
            actions,
        }
    }
}

/// Anything that maps an observation window to an action.
pub trait ActionModel {
    type Step;

    fn window(&self) -> usize;
    fn observe(&self, obs: &Observation) -> Result<Self::Step>;
    /// Action for the window, plus the global latent when the model has one.
    fn act(&self, window: &[&Self::Step]) -> Result<(Vec<f64>, Option<Vec<f32>>)>;

    /// `act` over several windows; implementations must match it exactly.
    fn act_batch(&self, windows: &[Vec<&Self::Step>]) -> Result<Vec<(Vec<f64>, Option<Vec<f32>>)>> {
        windows.iter().map(|w| self.act(w)).collect()
    }
}

impl ActionModel for PolicyParams<f32> {
    type Step = StepFeatures<f32>;

    fn window(&self) -> usize {
        self.cfg.window
    }

    fn observe(&self, obs: &Observation) -> Result<Self::Step> {
        self.project_step(obs)
    }

    fn act(&self, window: &[&Self::Step]) -> Result<(Vec<f64>, Option<Vec<f32>>)> {
        let (latent, _) = self.encode_steps(window)?;
        let cache = self.forward_decoder(latent, 1)?;
        Ok((self.action_from_head(&cache.out), Some(cast_vec(&cache.g))))
    }

    fn act_batch(&self, windows: &[Vec<&Self::Step>]) -> Result<Vec<(Vec<f64>, Option<Vec<f32>>)>> {
        if windows.is_empty() {
            return Ok(Vec::new());
        }
        let mut x = Vec::with_capacity(windows.len() * self.cfg.latent_shape().len());
        for w in windows {
            x.extend(self.encode_steps(w)?.0);
        }
        let cache = self.forward_decoder(x, windows.len())?;
        Ok((0..windows.len())
            .map(|i| (self.action_from_head(cache.head_out(i)), Some(cast_vec(cache.global(i)))))
            .collect())
    }
}

/// The task's own expert, reading state and task id from the observation.
pub struct ExpertPolicy<'a> {
    pub suite: &'a Suite,
}

impl ActionModel for ExpertPolicy<'_> {
    type Step = Observation;

    fn window(&self) -> usize {
        1
    }

    fn observe(&self, obs: &Observation) -> Result<Self::Step> {
        Ok(obs.clone())
    }

    fn act(&self, window: &[&Self::Step]) -> Result<(Vec<f64>, Option<Vec<f32>>)> {
        let last = window.last().ok_or_else(|| domain("empty window"))?;
        let a = self.suite.expert_action(last.task_language_id, &last.state)?;
        Ok((a.into_iter().map(f64::from).collect(), None))
    }
}

/// Always emits the same action.
pub struct ConstantPolicy(pub Vec<f64>);

impl ActionModel for ConstantPolicy {
    type Step = ();

    fn window(&self) -> usize {
        1
    }

    fn observe(&self, _obs: &Observation) -> Result<()> {
        Ok(())
    }

    fn act(&self, _window: &[&()]) -> Result<(Vec<f64>, Option<Vec<f32>>)> {
        Ok((self.0.clone(), None))
    }
}

/// Closed-loop rollouts of trials `0..n_trials`, stepped in lockstep. Trial
/// `i` starts from a state drawn from its own stream derived from
/// `(seed, i)`. Returns each trial's mean per-step action error against the
/// expert and optionally collects the visited global latents.
fn rollouts<M: ActionModel>(
    model: &M,
    suite: &Suite,
    task: TaskId,
    n_trials: usize,
    seed: u64,
    mut globals: Option<&mut Vec<Vec<f32>>>,
) -> Result<Vec<f64>> {
    let mut states: Vec<Vec<f32>> = (0..n_trials)
        .map(|trial| {
            let mut rng = indexed_substream(seed, "trial", trial as u64);
            normal_vec(&mut rng, suite.policy.state_dim, 1.0)
                .into_iter()
                .map(|x| x as f32)
                .collect()
        })
        .collect();
    let mut steps: Vec<Vec<M::Step>> = (0..n_trials).map(|_| Vec::new()).collect();
    let mut errors = vec![0.0f64; n_trials];
    let mut diverged = vec![false; n_trials];
    for t in 0..suite.cfg.trajectory_len {
        for (trial_steps, state) in steps.iter_mut().zip(&states) {
            trial_steps.push(model.observe(&suite.observation(task, state)?)?);
        }
        let windows: Vec<Vec<&M::Step>> = steps
            .iter()
            .map(|s| window_indices(t, model.window()).into_iter().map(|i| &s[i]).collect())
            .collect();
        let outputs = model.act_batch(&windows)?;
        for (trial, (action, g)) in outputs.into_iter().enumerate() {
            if diverged[trial] || action.iter().any(|a| !a.is_finite()) {
                diverged[trial] = true;
                continue;
            }
            let state = &states[trial];
            let expert = suite.expert_action(task, state)?;
            errors[trial] += action
                .iter()
                .zip(&expert)
                .map(|(a, e)| (a - *e as f64).powi(2))
                .sum::<f64>()
                .sqrt();
            if let (Some(out), Some(g)) = (globals.as_deref_mut(), g) {
                out.push(g);
            }
            states[trial] = suite.next_state(state, &action);
        }
    }
    Ok(errors
        .into_iter()
        .zip(diverged)
        .map(|(e, d)| if d { f64::INFINITY } else { e / suite.cfg.trajectory_len as f64 })
        .collect())
}

/// Fraction of `n_trials` closed-loop rollouts whose mean action error stays
/// below the task's success threshold.
pub fn evaluate_policy<M: ActionModel>(model: &M, suite: &Suite, task: TaskId, n_trials: usize, seed: u64) -> Result<f64> {
    if n_trials == 0 {
        return Ok(0.0);
    }
    let tau = suite.task(task)?.success_threshold;
    let errors = rollouts(model, suite, task, n_trials, seed, None)?;
    Ok(errors.iter().filter(|&&e| e < tau).count() as f64 / n_trials as f64)
}

/// Global latents visited by `n_trials` evaluation rollouts of `task`, in
/// step-major order.
pub fn collect_globals(
    params: &PolicyParams<f32>,
    suite: &Suite,
    task: TaskId,
    n_trials: usize,
    seed: u64,
) -> Result<Vec<Vec<f32>>> {
    let mut out = Vec::new();
    rollouts(params, suite, task, n_trials, seed, Some(&mut out))?;
    Ok(out)
}

/// Mean cosine similarity between each task's global latents (rows) and
/// every registered reference (columns, ascending task id).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeparationReport {
    pub tasks: Vec<TaskId>,
    pub references: Vec<TaskId>,
    pub similarity: Vec<Vec<f64>>,
}

impl SeparationReport {
    pub fn get(&self, task: TaskId, reference: TaskId) -> Option<f64> {
        let i = self.tasks.iter().position(|&t| t == task)?;
        let j = self.references.iter().position(|&t| t == reference)?;
        Some(self.similarity[i][j])
    }
}

pub fn separation_from_globals(
    globals: &BTreeMap<TaskId, Vec<Vec<f32>>>,
    references: &ReferenceRegistry,
) -> Result<SeparationReport> {
    let refs: Vec<_> = references.iter().collect();
    let mut similarity = Vec::with_capacity(globals.len());
    for (task, gs) in globals {
        if gs.is_empty() {
            return Err(domain(format!("no global latents for task {task}")));
        }
        let row = refs
            .iter()
            .map(|r| {
                let total = gs
                    .iter()
                    .map(|g| cosine_similarity(g, r.h_ref.as_slice()))
                    .sum::<Result<f64>>()?;
                Ok(total / gs.len() as f64)
            })
            .collect::<Result<Vec<f64>>>()?;
        similarity.push(row);
    }
    Ok(SeparationReport {
        tasks: globals.keys().copied().collect(),
        references: refs.iter().map(|r| r.task_id).collect(),
        similarity,
    })
}

/// Rolls evaluation trajectories for `tasks` and reports how close their
/// global latents sit to every task reference.
pub fn separation_report(
    params: &PolicyParams<f32>,
    suite: &Suite,
    references: &ReferenceRegistry,
    tasks: &[TaskId],
    n_trials: usize,
    seed: u64,
) -> Result<SeparationReport> {
    let mut globals = BTreeMap::new();
    for &task in tasks {
        globals.insert(task, collect_globals(params, suite, task, n_trials, seed)?);
    }
    separation_from_globals(&globals, references)
}
