//! Ablation grids: each cell overrides keys of a base training config and
//! runs the whole pipeline.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use super::eval::{evaluate, EvalOptions, EvalReport};
use super::policy::Dataset;
use super::run::{train, TrainOptions};
use super::{LossBreakdown, TrainConfig};
use crate::error::{Error, Result};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationCell {
    pub name: String,
    /// Keys merged over the base config, e.g. `model.gst.pe_mode`.
    #[serde(default)]
    pub set: toml::Table,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationGrid {
    #[serde(rename = "cell", default)]
    pub cells: Vec<AblationCell>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub name: String,
    pub last: LossBreakdown,
    pub eval: EvalReport,
}

fn merge(base: &mut toml::Table, over: &toml::Table) {
    for (k, v) in over {
        match (base.get_mut(k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            _ => {
                base.insert(k.clone(), v.clone());
            }
        }
    }
}

/// Parse a grid file into one validated config per cell. Unknown keys and
/// invalid flag combinations are rejected here, before anything runs.
pub fn parse_grid(text: &str, base: &TrainConfig) -> Result<Vec<(String, TrainConfig)>> {
    let grid: AblationGrid = toml::from_str(text).map_err(|e| Error::Config(format!("ablation grid: {e}")))?;
    if grid.cells.is_empty() {
        return Err(Error::Config("ablation grid has no cells".into()));
    }
    let mut seen = BTreeSet::new();
    let base_table = toml::Table::try_from(base).map_err(|e| Error::Config(e.to_string()))?;
    grid.cells
        .iter()
        .map(|c| {
            if !seen.insert(c.name.clone()) {
                return Err(Error::Config(format!("duplicate cell {}", c.name)));
            }
            let mut t = base_table.clone();
            merge(&mut t, &c.set);
            let cfg: TrainConfig = t
                .try_into()
                .map_err(|e| Error::Config(format!("cell {}: {e}", c.name)))?;
            cfg.validate()
                .map_err(|e| Error::Config(format!("cell {}: {e}", c.name)))?;
            Ok((c.name.clone(), cfg))
        })
        .collect()
}

/// Train and evaluate every cell. Datasets are built once per distinct
/// data configuration.
pub fn ablation_matrix(cells: &[(String, TrainConfig)], eval: EvalOptions) -> Result<Vec<AblationRow>> {
    let mut cache: Vec<((u64, usize, usize, usize), Dataset)> = Vec::new();
    let mut rows = Vec::new();
    for (name, cfg) in cells {
        let key = (cfg.seed, cfg.data.train_scenes, cfg.data.val_scenes, cfg.model.gst.feature_dim);
        if !cache.iter().any(|(k, _)| *k == key) {
            let d = Dataset::synthetic(key.0, key.1, key.2, key.3)?;
            cache.push((key, d));
        }
        let data = &cache.iter().find(|(k, _)| *k == key).unwrap().1;
        let out = train(cfg, data, TrainOptions::default())?;
        let report = evaluate(&out.policy, &data.val, eval)?;
        rows.push(AblationRow {
            name: name.clone(),
            last: out.log.last().map(|l| l.loss).unwrap_or_default(),
            eval: report,
        });
    }
    Ok(rows)
}

pub const TABLE_HEADER: &str = "cell\ttotal\tflow\tcot\tdepth\tval_depth\ttoken_acc\tcentroid_err_m\trollout_err_m\tcomposite";

impl AblationRow {
    pub fn to_line(&self) -> String {
        let e = &self.eval;
        format!(
            "{}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.4}\t{:.4}\t{:.5}\t{:.4}",
            self.name,
            self.last.total,
            self.last.flow,
            self.last.cot,
            self.last.depth,
            e.depth_loss,
            e.chain.token_acc,
            e.chain.centroid_err_median_m,
            e.rollout_err_m,
            e.composite()
        )
    }
}

/// Tab-delimited table with a header row.
pub fn table(rows: &[AblationRow]) -> String {
    let mut s = String::from(TABLE_HEADER);
    s.push('\n');
    for r in rows {
        s.push_str(&r.to_line());
        s.push('\n');
    }
    s
}
