use std::io::Write;

use serde::{Deserialize, Serialize};

use super::config::{ModuleFlags, TrainConfig};
use super::train_on;
use crate::synthworld::Dataset;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AblationRow {
    pub name: String,
    pub flags: ModuleFlags,
}

impl AblationRow {
    pub fn new(name: &str, pim: bool, mgrm: bool, eagr: bool) -> Self {
        Self {
            name: name.to_string(),
            flags: ModuleFlags { pim, mgrm, eagr },
        }
    }
}

/// Baseline, each module stacked on mining, and the full model.
pub fn standard_rows() -> Vec<AblationRow> {
    vec![
        AblationRow::new("baseline", false, false, false),
        AblationRow::new("+pim", true, false, false),
        AblationRow::new("+pim+mgrm", true, true, false),
        AblationRow::new("+pim+eagr", true, false, true),
        AblationRow::new("full", true, true, true),
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationSummary {
    pub name: String,
    pub flags: ModuleFlags,
    /// Final target mAP of every replicate, in replicate order.
    pub maps: Vec<f64>,
    pub mean: f64,
    /// Sample standard deviation; 0 for a single replicate.
    pub sd: f64,
}

/// Trains every row on `seeds` replicates. Replicate `r` uses
/// `base.seed + r` both for the scenario and for training, so all rows of a
/// replicate see exactly the same data.
pub fn ablation_grid(base: &TrainConfig, rows: &[AblationRow], seeds: usize) -> Result<Vec<AblationSummary>> {
    if seeds == 0 {
        return Err(Error::Config("ablation needs at least one seed".into()));
    }
    let mut maps = vec![Vec::with_capacity(seeds); rows.len()];
    for r in 0..seeds as u64 {
        let mut scenario = base.scenario.clone();
        scenario.seed = base.scenario.seed + r;
        let data = Dataset::generate(&scenario)?;
        for (k, row) in rows.iter().enumerate() {
            let cfg = TrainConfig {
                scenario: scenario.clone(),
                flags: row.flags,
                seed: base.seed + r,
                ..base.clone()
            };
            let out = train_on(&cfg, &data)?;
            maps[k].push(out.record.final_map().unwrap_or(0.0));
        }
    }
    Ok(rows
        .iter()
        .zip(maps)
        .map(|(row, maps)| {
            let (mean, sd) = mean_sd(&maps);
            AblationSummary {
                name: row.name.clone(),
                flags: row.flags,
                maps,
                mean,
                sd,
            }
        })
        .collect())
}

pub fn mean_sd(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// `row,pim,mgrm,eagr,seeds,map_mean,map_sd`, mAP in points.
pub fn write_ablation_csv<W: Write>(rows: &[AblationSummary], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["row", "pim", "mgrm", "eagr", "seeds", "map_mean", "map_sd"])?;
    for r in rows {
        w.write_record([
            r.name.clone(),
            r.flags.pim.to_string(),
            r.flags.mgrm.to_string(),
            r.flags.eagr.to_string(),
            r.maps.len().to_string(),
            format!("{:.4}", 100.0 * r.mean),
            format!("{:.4}", 100.0 * r.sd),
        ])?;
    }
    w.flush().map_err(|e| Error::io("<ablation csv>", e))?;
    Ok(())
}
