//! Ablation sweeps: one training run per point of a Cartesian grid, all with
//! the same seed, summarized in a comparison table.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::DatasetBundle;
use crate::error::{config_err, GudnError, Result};
use crate::harness::config::TrainConfig;
use crate::harness::train::{train, train_to_dir};
use crate::metrics::MetricsReport;
use crate::model::AblationMode;
use crate::reinforce::ReinforceMode;

pub const DEFAULT_SWEEP_LENGTHS: [usize; 3] = [64, 128, 256];

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum AblationAxis {
    Mode(Vec<AblationMode>),
    ReinforceMode(Vec<ReinforceMode>),
    MaxInputLen(Vec<usize>),
}

impl AblationAxis {
    pub fn name(&self) -> &'static str {
        match self {
            AblationAxis::Mode(_) => "mode",
            AblationAxis::ReinforceMode(_) => "reinforce_mode",
            AblationAxis::MaxInputLen(_) => "max_input_len",
        }
    }

    fn len(&self) -> usize {
        match self {
            AblationAxis::Mode(v) => v.len(),
            AblationAxis::ReinforceMode(v) => v.len(),
            AblationAxis::MaxInputLen(v) => v.len(),
        }
    }

    fn apply(&self, i: usize, cfg: &mut TrainConfig) -> String {
        match self {
            AblationAxis::Mode(v) => {
                cfg.mode = v[i];
                v[i].as_str().to_string()
            }
            AblationAxis::ReinforceMode(v) => {
                cfg.reinforce_mode = v[i];
                v[i].as_str().to_string()
            }
            AblationAxis::MaxInputLen(v) => {
                cfg.encoder.max_input_len = v[i];
                v[i].to_string()
            }
        }
    }
}

impl FromStr for AblationAxis {
    type Err = GudnError;

    /// `mode`, `reinforce_mode` or `max_input_len`, optionally followed by
    /// `=a|b|c` to pick values (`max_input_len=16|32`).
    fn from_str(s: &str) -> Result<Self> {
        let (name, values) = match s.split_once('=') {
            Some((n, v)) => (n.trim(), Some(v)),
            None => (s.trim(), None),
        };
        let parts = |v: &str| v.split('|').map(str::trim).map(str::to_string).collect::<Vec<_>>();
        match name {
            "mode" => Ok(AblationAxis::Mode(match values {
                Some(v) => parts(v).iter().map(|p| p.parse()).collect::<Result<_>>()?,
                None => AblationMode::ALL.to_vec(),
            })),
            "reinforce_mode" => Ok(AblationAxis::ReinforceMode(match values {
                Some(v) => parts(v).iter().map(|p| p.parse()).collect::<Result<_>>()?,
                None => ReinforceMode::ALL.to_vec(),
            })),
            "max_input_len" => Ok(AblationAxis::MaxInputLen(match values {
                Some(v) => parts(v)
                    .iter()
                    .map(|p| p.parse().map_err(|_| config_err(format!("bad length {p:?}"))))
                    .collect::<Result<_>>()?,
                None => DEFAULT_SWEEP_LENGTHS.to_vec(),
            })),
            other => Err(config_err(format!("unknown ablation axis {other:?}"))),
        }
    }
}

/// Parses a comma-separated axis list such as `mode,reinforce_mode`.
pub fn parse_axes(spec: &str) -> Result<Vec<AblationAxis>> {
    let axes: Vec<AblationAxis> = spec
        .split(',')
        .filter(|s| !s.trim().is_empty())
        .map(str::parse)
        .collect::<Result<_>>()?;
    if axes.is_empty() {
        return Err(config_err("no ablation axes given"));
    }
    if axes.iter().any(|a| a.len() == 0) {
        return Err(config_err("ablation axis with no values"));
    }
    Ok(axes)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    /// `(axis, value)` pairs identifying the grid point.
    pub point: Vec<(String, String)>,
    pub metrics: MetricsReport,
    pub best_epoch: Option<usize>,
}

impl AblationRow {
    pub fn label(&self) -> String {
        self.point.iter().map(|(k, v)| format!("{k}={v}")).collect::<Vec<_>>().join(",")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub seed: u64,
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn row(&self, point: &[(&str, &str)]) -> Option<&AblationRow> {
        self.rows.iter().find(|r| {
            point
                .iter()
                .all(|(k, v)| r.point.iter().any(|(rk, rv)| rk == k && rv == v))
        })
    }

    pub fn to_text(&self) -> String {
        let labels: Vec<String> = self.rows.iter().map(AblationRow::label).collect();
        let w = labels.iter().map(String::len).max().unwrap_or(0).max(5);
        let mut out = format!("{:<w$}  {:>7} {:>7} {:>7} {:>7} {:>7} {:>7} {:>7} {:>7}\n", "run", "P@1", "P@3", "P@5", "nDCG@3", "nDCG@5", "PSP@1", "PSP@3", "PSP@5");
        for (label, r) in labels.iter().zip(&self.rows) {
            let m = &r.metrics;
            let _ = writeln!(
                out,
                "{:<w$}  {:>7.4} {:>7.4} {:>7.4} {:>7.4} {:>7.4} {:>7.4} {:>7.4} {:>7.4}",
                label, m.p_at[&1], m.p_at[&3], m.p_at[&5], m.ndcg_at[&3], m.ndcg_at[&5], m.psp_at[&1], m.psp_at[&3], m.psp_at[&5]
            );
        }
        out
    }
}

/// Every combination of axis values applied to `base`, in row-major order
/// (the last axis varies fastest).
pub fn grid(base: &TrainConfig, axes: &[AblationAxis]) -> Vec<(Vec<(String, String)>, TrainConfig)> {
    let mut points = vec![(Vec::new(), base.clone())];
    for axis in axes {
        let mut next = Vec::with_capacity(points.len() * axis.len());
        for (point, cfg) in &points {
            for i in 0..axis.len() {
                let mut cfg = cfg.clone();
                let value = axis.apply(i, &mut cfg);
                let mut point = point.clone();
                point.push((axis.name().to_string(), value));
                next.push((point, cfg));
            }
        }
        points = next;
    }
    points
}

/// Trains every grid point (in parallel, results in grid order). With
/// `out_dir`, each run writes its checkpoint and record to a subdirectory
/// and the table is saved as `ablation.json` and `ablation.txt`.
pub fn run_ablation(base: &TrainConfig, axes: &[AblationAxis], dataset: &DatasetBundle, out_dir: Option<&Path>) -> Result<AblationTable> {
    let points = grid(base, axes);
    let rows: Vec<AblationRow> = points
        .par_iter()
        .map(|(point, cfg)| {
            let outcome = match out_dir {
                Some(dir) => {
                    let name: Vec<String> = point.iter().map(|(k, v)| format!("{k}-{v}")).collect();
                    train_to_dir(cfg, dataset, &dir.join(name.join("_")))?
                }
                None => train(cfg, dataset)?,
            };
            let metrics = outcome
                .record
                .final_metrics
                .ok_or_else(|| crate::error::data_err("ablation needs a non-empty test split"))?;
            Ok(AblationRow {
                point: point.clone(),
                metrics,
                best_epoch: outcome.record.best_epoch,
            })
        })
        .collect::<Result<_>>()?;
    let table = AblationTable { seed: base.seed, rows };
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("ablation.json"), serde_json::to_vec_pretty(&table)?)?;
        std::fs::write(dir.join("ablation.txt"), table.to_text())?;
    }
    Ok(table)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn axis_parsing() {
        let axes = parse_axes("mode,reinforce_mode,max_input_len").unwrap();
        assert_eq!(axes[0], AblationAxis::Mode(AblationMode::ALL.to_vec()));
        assert_eq!(axes[2], AblationAxis::MaxInputLen(vec![64, 128, 256]));
        let axes = parse_axes("mode=FULL|BERT_ONLY,max_input_len=16").unwrap();
        assert_eq!(axes[0], AblationAxis::Mode(vec![AblationMode::Full, AblationMode::BertOnly]));
        assert_eq!(axes[1], AblationAxis::MaxInputLen(vec![16]));
        assert!(parse_axes("depth").is_err());
        assert!(parse_axes("").is_err());
        assert!(parse_axes("max_input_len=x").is_err());
    }

    #[test]
    fn grid_is_cartesian_and_keeps_seed() {
        let mut base = TrainConfig::default();
        base.seed = 11;
        let axes = parse_axes("mode,reinforce_mode").unwrap();
        let g = grid(&base, &axes);
        assert_eq!(g.len(), 12);
        assert!(g.iter().all(|(_, c)| c.seed == 11));
        assert_eq!(g[1].1.mode, AblationMode::Full);
        assert_eq!(g[1].1.reinforce_mode, ReinforceMode::ALL[1]);
        assert_eq!(g[3].1.mode, AblationMode::ALL[1]);
    }
}
