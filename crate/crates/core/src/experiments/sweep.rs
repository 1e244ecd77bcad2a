//! Training sweeps over `(H, n, d_h, T)` grids.

use alloc::string::{String, ToString};
use alloc::vec::Vec;

use super::datagen::{gen_general_position_dataset, gen_shared_context_dataset};
use super::train::{train_memorize, TrainConfig, TrainReport};
use crate::error::{arg_err, Result};
use crate::model::{AttentionConfig, Dataset};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct GridCell {
    #[cfg_attr(feature = "serde", serde(rename = "H"))]
    pub heads: usize,
    pub n: usize,
    #[cfg_attr(feature = "serde", serde(rename = "dh"))]
    pub d_h: usize,
    #[cfg_attr(feature = "serde", serde(rename = "T"))]
    pub t: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum DataKind {
    Shared,
    Genpos,
}

/// Settings shared by every cell of a sweep.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct SweepBase {
    pub d: usize,
    pub kind: DataKind,
    pub train: TrainConfig,
}

impl SweepBase {
    pub fn dataset(&self, cell: &GridCell, seed: u64) -> Result<Dataset> {
        match self.kind {
            DataKind::Shared => gen_shared_context_dataset(cell.t, cell.n, self.d, self.train.task, seed),
            DataKind::Genpos => gen_general_position_dataset(cell.t, cell.n, self.d, self.train.task, seed),
        }
    }

    pub fn model(&self, cell: &GridCell, data: &Dataset) -> Result<AttentionConfig> {
        let d_out = data.dims().d_out;
        AttentionConfig::new(cell.heads, self.d, cell.d_h, d_out, d_out)
    }
}

/// One seed of one cell: fresh data and initialisation from `seed`.
pub fn run_cell(cell: &GridCell, base: &SweepBase, seed: u64) -> Result<TrainReport> {
    let data = base.dataset(cell, seed)?;
    let cfg = base.model(cell, &data)?;
    let tcfg = TrainConfig { seed, ..base.train };
    Ok(train_memorize(&data, &cfg, &tcfg)?.1)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CellOutcome {
    pub cell: GridCell,
    pub seed: u64,
    pub result: core::result::Result<TrainReport, String>,
}

/// One CSV row `H,n,dh,T,seed,metric,value`; `seed` is `None` for the median row.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct SweepRow {
    #[cfg_attr(feature = "serde", serde(rename = "H"))]
    pub heads: usize,
    pub n: usize,
    #[cfg_attr(feature = "serde", serde(rename = "dh"))]
    pub d_h: usize,
    #[cfg_attr(feature = "serde", serde(rename = "T"))]
    pub t: usize,
    pub seed: String,
    pub metric: String,
    pub value: f64,
}

/// Runs every cell for every seed in order. Failures are kept per cell.
pub fn sweep(grid: &[GridCell], base: &SweepBase, seeds: &[u64]) -> Result<Vec<CellOutcome>> {
    if grid.is_empty() || seeds.is_empty() {
        return Err(arg_err!("sweep needs at least one cell and one seed"));
    }
    let mut out = Vec::with_capacity(grid.len() * seeds.len());
    for cell in grid {
        for &seed in seeds {
            out.push(CellOutcome {
                cell: *cell,
                seed,
                result: run_cell(cell, base, seed).map_err(|e| e.to_string()),
            });
        }
    }
    Ok(out)
}

pub fn median(values: &mut [f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    values.sort_by(|a, b| a.total_cmp(b));
    let k = values.len();
    Some(if k % 2 == 1 {
        values[k / 2]
    } else {
        0.5 * (values[k / 2 - 1] + values[k / 2])
    })
}

/// Per-seed metric rows plus one `median` row per cell (over successful seeds).
/// Failed seeds produce a row with metric `error` and value NaN.
pub fn sweep_rows(outcomes: &[CellOutcome]) -> Vec<SweepRow> {
    let mut rows = Vec::new();
    let mut cells: Vec<GridCell> = Vec::new();
    for o in outcomes {
        if !cells.contains(&o.cell) {
            cells.push(o.cell);
        }
    }
    for cell in cells {
        let row = |seed: String, metric: &str, value: f64| SweepRow {
            heads: cell.heads,
            n: cell.n,
            d_h: cell.d_h,
            t: cell.t,
            seed,
            metric: metric.to_string(),
            value,
        };
        let mut values = Vec::new();
        let mut metric_name = "accuracy";
        for o in outcomes.iter().filter(|o| o.cell == cell) {
            match &o.result {
                Ok(rep) => {
                    let (name, v) = rep.metric();
                    metric_name = name;
                    values.push(v);
                    rows.push(row(o.seed.to_string(), name, v));
                }
                Err(_) => rows.push(row(o.seed.to_string(), "error", f64::NAN)),
            }
        }
        if let Some(m) = median(&mut values) {
            rows.push(row("median".to_string(), metric_name, m));
        }
    }
    rows
}
