//! Experiment configuration: one JSON tree with a default for every field,
//! optionally overridden by `key.path=value` assignments.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use mlr_core::bench::SuiteConfig;
use mlr_core::ifa::IfaConfig;
use mlr_core::policy::PolicyConfig;
use mlr_core::trainer::TrainConfig;
use mlr_core::Error as CoreError;
use serde::{Deserialize, Serialize};
use serde_json::Value;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// Plain fine-tuning: no buffer and no feature adjustment.
    Sequential,
    /// Latent replay without feature adjustment.
    Mlr,
    /// Latent replay plus feature adjustment.
    #[default]
    MlrIfa,
}

impl Method {
    pub fn uses_buffer(self) -> bool {
        !matches!(self, Method::Sequential)
    }

    pub fn uses_ifa(self) -> bool {
        matches!(self, Method::MlrIfa)
    }

    pub fn name(self) -> &'static str {
        match self {
            Method::Sequential => "sequential",
            Method::Mlr => "mlr",
            Method::MlrIfa => "mlr_ifa",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BufferSettings {
    pub store_probability: f64,
    /// Entries kept per task; `null` means five trajectories' worth of windows.
    pub per_task_capacity: Option<usize>,
}

impl Default for BufferSettings {
    fn default() -> Self {
        Self {
            store_probability: 0.5,
            per_task_capacity: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub suite: SuiteConfig,
    pub policy: PolicyConfig,
    /// The `seed` field is replaced by a value derived from each run seed.
    pub pretrain: TrainConfig,
    /// The `seed` field is replaced by a value derived from each run seed.
    pub lifelong: TrainConfig,
    pub ifa: IfaConfig,
    pub buffer: BufferSettings,
    pub method: Method,
    pub seeds: Vec<u64>,
    /// Evaluation rollouts per task and success-matrix entry.
    pub eval_trials: usize,
    pub output_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            suite: SuiteConfig::default(),
            policy: PolicyConfig::default(),
            pretrain: TrainConfig::default(),
            lifelong: TrainConfig::default(),
            ifa: IfaConfig::default(),
            buffer: BufferSettings::default(),
            method: Method::default(),
            seeds: vec![0, 1, 2],
            eval_trials: 20,
            output_dir: PathBuf::from("runs/default"),
        }
    }
}

fn invalid(msg: impl Into<String>) -> anyhow::Error {
    CoreError::Config(msg.into()).into()
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.policy.validate()?;
        self.suite.validate(&self.policy)?;
        self.pretrain.validate()?;
        self.lifelong.validate()?;
        self.ifa.validate()?;
        if !(0.0..=1.0).contains(&self.buffer.store_probability) {
            return Err(invalid("buffer.store_probability must lie in [0, 1]"));
        }
        if self.buffer.per_task_capacity == Some(0) {
            return Err(invalid("buffer.per_task_capacity must be positive"));
        }
        if self.seeds.is_empty() {
            return Err(invalid("at least one seed is required"));
        }
        Ok(())
    }

    pub fn per_task_capacity(&self) -> usize {
        self.buffer
            .per_task_capacity
            .unwrap_or(5 * self.suite.trajectory_len)
    }

    /// λ actually used by the method.
    pub fn effective_lambda(&self) -> f64 {
        if self.method.uses_ifa() {
            self.ifa.lambda_ifa
        } else {
            0.0
        }
    }

    pub fn from_value(value: Value) -> Result<Self> {
        let cfg: Self = serde_json::from_value(value).map_err(|e| invalid(format!("invalid config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_value(&self) -> Value {
        serde_json::to_value(self).expect("config serializes")
    }

    /// Reads `path` (or starts from defaults) and applies `overrides`.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut value = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(CoreError::from)
                    .with_context(|| format!("reading config {}", p.display()))?;
                serde_json::from_str(&text).map_err(|e| invalid(format!("{}: {e}", p.display())))?
            }
            None => Value::Object(Default::default()),
        };
        for o in overrides {
            apply_override(&mut value, o)?;
        }
        Self::from_value(value)
    }

    /// Copy with `key.path=value` assignments applied.
    pub fn with_overrides(&self, overrides: &[String]) -> Result<Self> {
        let mut value = self.to_value();
        for o in overrides {
            apply_override(&mut value, o)?;
        }
        Self::from_value(value)
    }
}

/// Sets `a.b.c=value` in a JSON tree. The value is parsed as JSON when
/// possible and taken as a string otherwise.
pub fn apply_override(root: &mut Value, assignment: &str) -> Result<()> {
    let (path, raw) = assignment
        .split_once('=')
        .ok_or_else(|| invalid(format!("override `{assignment}` is not key=value")))?;
    let keys: Vec<&str> = path.split('.').map(str::trim).collect();
    if keys.iter().any(|k| k.is_empty()) {
        bail!(invalid(format!("override `{assignment}` has an empty key")));
    }
    let value = serde_json::from_str(raw.trim()).unwrap_or_else(|_| Value::String(raw.trim().to_string()));
    let mut node = root;
    for key in &keys[..keys.len() - 1] {
        let obj = node
            .as_object_mut()
            .ok_or_else(|| invalid(format!("override `{path}` descends into a non-object")))?;
        node = obj.entry(key.to_string()).or_insert_with(|| Value::Object(Default::default()));
    }
    node.as_object_mut()
        .ok_or_else(|| invalid(format!("override `{path}` descends into a non-object")))?
        .insert(keys[keys.len() - 1].to_string(), value);
    Ok(())
}
