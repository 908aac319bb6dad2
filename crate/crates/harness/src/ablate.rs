//! Ablation grids: one full experiment per cell, one table row per cell.

use std::fmt::Write as _;
use std::path::PathBuf;
use std::str::FromStr;

use anyhow::{bail, Result};
use mlr_core::Error as CoreError;
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::run::{mean_std, run_experiment, PretrainCache};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationKind {
    BufferProbability,
    AlphaSweep,
    CosineVsAngle,
    PairFraction,
    /// Mean-global references; declared but not implemented.
    ReferenceModeStub,
}

impl AblationKind {
    pub const ALL: [AblationKind; 5] = [
        AblationKind::BufferProbability,
        AblationKind::AlphaSweep,
        AblationKind::CosineVsAngle,
        AblationKind::PairFraction,
        AblationKind::ReferenceModeStub,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AblationKind::BufferProbability => "buffer_probability",
            AblationKind::AlphaSweep => "alpha_sweep",
            AblationKind::CosineVsAngle => "cosine_vs_angle",
            AblationKind::PairFraction => "pair_fraction",
            AblationKind::ReferenceModeStub => "reference_mode_stub",
        }
    }

    /// `(config key, values)` of every cell.
    pub fn grid(self) -> Result<(&'static str, Vec<&'static str>)> {
        Ok(match self {
            AblationKind::BufferProbability => ("buffer.store_probability", vec!["0.1", "0.2", "0.5"]),
            AblationKind::AlphaSweep => ("ifa.alpha", vec!["0.1", "0.3", "0.5", "0.7"]),
            AblationKind::CosineVsAngle => ("ifa.distance_mode", vec!["angle", "cosine"]),
            AblationKind::PairFraction => ("ifa.selection_fraction", vec!["0.333", "0.5", "0.666"]),
            AblationKind::ReferenceModeStub => {
                bail!(CoreError::Config(
                    "reference_mode_stub is not implemented: mean-global references are out of scope".into()
                ))
            }
        })
    }
}

impl FromStr for AblationKind {
    type Err = anyhow::Error;

    fn from_str(s: &str) -> Result<Self> {
        AblationKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| CoreError::Config(format!("unknown ablation kind `{s}`")).into())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub key: String,
    pub value: String,
    pub fwt: f64,
    pub fwt_std: f64,
    pub nbt: f64,
    pub nbt_std: f64,
    pub auc: f64,
    pub auc_std: f64,
    /// Latent bytes held by the buffer after the last stage, averaged over seeds.
    pub buffer_bytes: f64,
    pub seeds: Vec<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub kind: AblationKind,
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("key,value,fwt,fwt_std,nbt,nbt_std,auc,auc_std,buffer_bytes,seeds\n");
        for r in &self.rows {
            let seeds: Vec<String> = r.seeds.iter().map(u64::to_string).collect();
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{},{},{}",
                r.key,
                r.value,
                r.fwt,
                r.fwt_std,
                r.nbt,
                r.nbt_std,
                r.auc,
                r.auc_std,
                r.buffer_bytes,
                seeds.join(" ")
            );
        }
        out
    }
}

/// Runs every cell of `kind` on top of `base`, each in its own directory
/// under `<output_dir>/ablate_<kind>/`, and writes `table.csv` there.
pub fn run_ablation(kind: AblationKind, base: &ExperimentConfig, cache: &mut PretrainCache) -> Result<AblationTable> {
    let (key, values) = kind.grid()?;
    base.validate()?;
    let root: PathBuf = base.output_dir.join(format!("ablate_{}", kind.name()));
    let mut rows = Vec::with_capacity(values.len());
    for value in values {
        let mut cfg = base.with_overrides(&[format!("{key}={value}")])?;
        cfg.output_dir = root.join(format!("{}_{value}", key.rsplit('.').next().unwrap_or(key)));
        let summary = run_experiment(&cfg, cache)?;
        let m = &summary.metrics;
        let bytes: Vec<f64> = summary.seeds.iter().map(|s| s.final_buffer_bytes as f64).collect();
        rows.push(AblationRow {
            key: key.to_string(),
            value: value.to_string(),
            fwt: m.fwt,
            fwt_std: m.fwt_std,
            nbt: m.nbt,
            nbt_std: m.nbt_std,
            auc: m.auc,
            auc_std: m.auc_std,
            buffer_bytes: mean_std(&bytes).0,
            seeds: m.seeds.clone(),
        });
    }
    let table = AblationTable { kind, rows };
    std::fs::create_dir_all(&root).map_err(CoreError::from)?;
    std::fs::write(root.join("table.csv"), table.to_csv()).map_err(CoreError::from)?;
    Ok(table)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grids_have_declared_sizes() {
        assert_eq!(AblationKind::BufferProbability.grid().unwrap().1.len(), 3);
        assert_eq!(AblationKind::AlphaSweep.grid().unwrap().1.len(), 4);
        assert_eq!(AblationKind::CosineVsAngle.grid().unwrap().1.len(), 2);
        assert_eq!(AblationKind::PairFraction.grid().unwrap().1.len(), 3);
        assert!(AblationKind::ReferenceModeStub.grid().is_err());
    }

    #[test]
    fn kinds_parse_by_name() {
        for k in AblationKind::ALL {
            assert_eq!(k.name().parse::<AblationKind>().unwrap(), k);
        }
        assert!("nope".parse::<AblationKind>().is_err());
    }
}
