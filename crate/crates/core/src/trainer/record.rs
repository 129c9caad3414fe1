//! Per-step and per-epoch training records and their file formats.

use std::io::Write;

use serde::{Deserialize, Serialize};

use super::objective::LossBreakdown;
use crate::eagr::GradReport;
use crate::evalkit::{TaxonomyCounts, TaxonomyFractions};
use crate::mgrm::RelationMatrix;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRow {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub grl: f64,
    pub losses: LossBreakdown,
    pub mined_source: usize,
    pub mined_target: usize,
    pub grads: Option<GradReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    /// Target-domain mAP at IoU 0.5 after NMS.
    pub map: f64,
    pub per_category_ap: Vec<Option<f64>>,
    /// Foreground target proposals whose best foreground class is right.
    pub target_accuracy: f64,
    pub taxonomy: Vec<TaxonomyCounts>,
    pub taxonomy_mean: TaxonomyFractions,
    pub mined_source: usize,
    pub mined_target: usize,
    /// Share of mined source proposals that belong to an object whose
    /// annotation was removed.
    pub mined_source_precision: Option<f64>,
    /// Steps in this epoch where the graph loss had no valid entries.
    pub mgrm_empty_steps: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelationSnapshot {
    pub epoch: usize,
    pub pi: Option<RelationMatrix>,
    pub z: Option<RelationMatrix>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct RunRecord {
    pub steps: Vec<StepRow>,
    pub epochs: Vec<EpochMetrics>,
    pub relations: Vec<RelationSnapshot>,
}

pub const STEP_COLUMNS: [&str; 19] = [
    "step",
    "epoch",
    "lr",
    "grl",
    "loss_det",
    "loss_mgrm",
    "loss_dis_daf",
    "loss_dis_eagr",
    "loss_total",
    "mined_source",
    "mined_target",
    "dot_cln_cpt",
    "dot_cln_t",
    "dot_cpt_t",
    "cos_cln_cpt",
    "cos_cln_t",
    "cos_cpt_t",
    "norm_cln",
    "norm_cpt",
];

fn opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:e}")).unwrap_or_default()
}

impl RunRecord {
    pub fn final_map(&self) -> Option<f64> {
        self.epochs.last().map(|e| e.map)
    }

    /// One row per step. Floats use Rust's shortest round-trip formatting,
    /// so identical runs produce identical bytes.
    pub fn write_steps_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(STEP_COLUMNS)?;
        for r in &self.steps {
            let g = r.grads.unwrap_or_default();
            w.write_record([
                r.step.to_string(),
                r.epoch.to_string(),
                format!("{:e}", r.lr),
                format!("{:e}", r.grl),
                format!("{:e}", r.losses.det),
                format!("{:e}", r.losses.mgrm),
                format!("{:e}", r.losses.dis_daf),
                format!("{:e}", r.losses.dis_eagr),
                format!("{:e}", r.losses.total),
                r.mined_source.to_string(),
                r.mined_target.to_string(),
                opt(g.dot_cln_cpt),
                opt(g.dot_cln_t),
                opt(g.dot_cpt_t),
                opt(g.cos_cln_cpt()),
                opt(g.cos_cln_t()),
                opt(g.cos_cpt_t()),
                opt(g.norm_cln),
                opt(g.norm_cpt),
            ])?;
        }
        w.flush().map_err(|e| Error::io("<run.csv>", e))?;
        Ok(())
    }

    /// Mean clean/corrupted gradient cosine over the last quarter of steps.
    pub fn late_clean_corrupted_cosine(&self) -> Option<f64> {
        let start = self.steps.len() - self.steps.len() / 4;
        let vals: Vec<f64> = self.steps[start..]
            .iter()
            .filter_map(|r| r.grads.and_then(|g| g.cos_cln_cpt()))
            .collect();
        (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
    }
}

/// Relation matrices as CSV: header `matrix,source_category,t0,...`, one
/// row per source category for `pi` then `z`. Masked entries are empty.
pub fn write_relation_csv<W: Write>(snapshot: &RelationSnapshot, categories: usize, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["matrix".to_string(), "source_category".to_string()];
    header.extend((0..categories).map(|v| format!("t{v}")));
    w.write_record(&header)?;
    for (name, m) in [("pi", &snapshot.pi), ("z", &snapshot.z)] {
        for u in 0..categories {
            let mut row = vec![name.to_string(), u.to_string()];
            row.extend((0..categories).map(|v| {
                m.as_ref()
                    .and_then(|m| m.get(u, v))
                    .map(|x| x.to_string())
                    .unwrap_or_default()
            }));
            w.write_record(&row)?;
        }
    }
    w.flush().map_err(|e| Error::io("<relmat csv>", e))?;
    Ok(())
}
