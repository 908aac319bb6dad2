//! Success-rate matrix and the forward-transfer / forgetting / area-under-curve
//! summaries computed from it.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{domain, Error, Result};
use crate::ifa::TaskId;

/// Lower-triangular `r[i][j]`: success on task `j` after learning through
/// task `i`. Row `i` holds `i + 1` entries.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuccessMatrix {
    task_ids: Vec<TaskId>,
    rows: Vec<Vec<Option<f32>>>,
}

impl SuccessMatrix {
    pub fn new(task_ids: Vec<TaskId>) -> Self {
        let rows = (0..task_ids.len()).map(|i| vec![None; i + 1]).collect();
        Self { task_ids, rows }
    }

    /// Builds a fully populated matrix from lower-triangular rows.
    pub fn from_rows(task_ids: Vec<TaskId>, rows: &[Vec<f32>]) -> Result<Self> {
        let mut m = Self::new(task_ids);
        if rows.len() != m.len() {
            return Err(domain("row count must equal task count"));
        }
        for (i, row) in rows.iter().enumerate() {
            if row.len() != i + 1 {
                return Err(domain(format!("row {i} must have {} entries", i + 1)));
            }
            for (j, &v) in row.iter().enumerate() {
                m.set(i, j, v)?;
            }
        }
        Ok(m)
    }

    pub fn len(&self) -> usize {
        self.task_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.task_ids.is_empty()
    }

    pub fn task_ids(&self) -> &[TaskId] {
        &self.task_ids
    }

    pub fn set(&mut self, i: usize, j: usize, value: f32) -> Result<()> {
        if j > i || i >= self.len() {
            return Err(domain(format!("entry ({i}, {j}) is outside the lower triangle")));
        }
        if !(0.0..=1.0).contains(&value) {
            return Err(domain(format!("success rate {value} outside [0, 1]")));
        }
        self.rows[i][j] = Some(value);
        Ok(())
    }

    pub fn get(&self, i: usize, j: usize) -> Option<f32> {
        self.rows.get(i).and_then(|r| r.get(j)).copied().flatten()
    }

    pub fn is_complete(&self) -> bool {
        self.rows.iter().all(|r| r.iter().all(Option::is_some))
    }

    fn value(&self, i: usize, j: usize) -> Result<f64> {
        self.get(i, j)
            .map(f64::from)
            .ok_or_else(|| domain(format!("success matrix entry ({i}, {j}) is unset")))
    }

    /// Header of task ids, then one line per row with the upper triangle left
    /// empty. Values use the shortest representation that round-trips.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        let header: Vec<String> = self.task_ids.iter().map(|t| t.to_string()).collect();
        out.push_str(&header.join(","));
        out.push('\n');
        for row in &self.rows {
            let cells: Vec<String> = (0..self.len())
                .map(|j| match row.get(j).copied().flatten() {
                    Some(v) => format!("{v}"),
                    None => String::new(),
                })
                .collect();
            let _ = writeln!(out, "{}", cells.join(","));
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header = lines.next().ok_or_else(|| Error::Format("empty success matrix CSV".into()))?;
        let task_ids = header
            .split(',')
            .map(|s| s.trim().parse::<TaskId>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::Format(format!("bad task id in header: {e}")))?;
        let mut m = Self::new(task_ids);
        for (i, line) in lines.enumerate() {
            if i >= m.len() {
                return Err(Error::Format("more rows than tasks".into()));
            }
            for (j, cell) in line.split(',').enumerate() {
                let cell = cell.trim();
                if cell.is_empty() {
                    continue;
                }
                let v: f32 = cell
                    .parse()
                    .map_err(|e| Error::Format(format!("bad value at ({i}, {j}): {e}")))?;
                m.set(i, j, v)?;
            }
        }
        Ok(m)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LifelongMetrics {
    pub fwt: f64,
    pub nbt: f64,
    pub auc: f64,
    /// False for a single task, where forgetting is undefined and `nbt` is 0.
    pub nbt_defined: bool,
}

/// FWT, NBT and AUC of a fully populated success matrix, using the
/// 1-indexed normalizers `1/(M−m)` and `1/(M−m+1)`.
pub fn lifelong_metrics(r: &SuccessMatrix) -> Result<LifelongMetrics> {
    let m_tasks = r.len();
    if m_tasks == 0 {
        return Err(domain("success matrix is empty"));
    }
    let mut fwt = 0.0;
    let mut nbt = 0.0;
    let mut auc = 0.0;
    for m in 0..m_tasks {
        let diag = r.value(m, m)?;
        fwt += diag;
        let later = ((m + 1)..m_tasks).map(|q| r.value(q, m)).collect::<Result<Vec<_>>>()?;
        if !later.is_empty() {
            nbt += later.iter().map(|v| diag - v).sum::<f64>() / later.len() as f64;
        }
        auc += (diag + later.iter().sum::<f64>()) / (later.len() + 1) as f64;
    }
    let n = m_tasks as f64;
    Ok(LifelongMetrics {
        fwt: fwt / n,
        nbt: if m_tasks > 1 { nbt / (n - 1.0) } else { 0.0 },
        auc: auc / n,
        nbt_defined: m_tasks > 1,
    })
}
