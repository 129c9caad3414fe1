//! Mining of confident proposals that overlap no annotated box.
//!
//! A proposal is mined when its objectness is strictly above the domain
//! threshold, it is not one of the annotated proposals, and it has zero IoU
//! with every annotated box. In source scenes "annotated" means the possibly
//! corrupted annotation set, so miss-annotated objects are exactly what this
//! step can recover. Target scenes have no annotations at all.

use serde::{Deserialize, Serialize};

use crate::diffcore::Matrix;
use crate::synthworld::{iou, Domain, Scene};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PimConfig {
    pub tau_source: f64,
    pub tau_target: f64,
    pub max_mined_per_scene: usize,
}

impl Default for PimConfig {
    fn default() -> Self {
        Self {
            tau_source: 0.9,
            tau_target: 0.9,
            max_mined_per_scene: 16,
        }
    }
}

impl PimConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, t) in [("tau_source", self.tau_source), ("tau_target", self.tau_target)] {
            if !(t > 0.0 && t < 1.0) {
                return Err(Error::Config(format!("{name} = {t} must lie in (0, 1)")));
            }
        }
        Ok(())
    }

    pub fn tau(&self, domain: Domain) -> f64 {
        match domain {
            Domain::Source => self.tau_source,
            Domain::Target => self.tau_target,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MinedProposal {
    /// Index into the scene's proposal list.
    pub proposal: usize,
    pub pseudo_label: usize,
    /// Objectness of the proposal.
    pub confidence: f64,
    pub domain: Domain,
}

/// Mines one scene. `logits` holds one row of foreground class logits per
/// proposal; the pseudo-label is the row argmax (lowest index on ties).
pub fn mine(scene: &Scene, logits: &Matrix, cfg: &PimConfig) -> Result<Vec<MinedProposal>> {
    if logits.rows() != scene.proposals.len() {
        return Err(Error::shape("pim::mine logits rows", scene.proposals.len(), logits.rows()));
    }
    if logits.cols() == 0 && !scene.proposals.is_empty() {
        return Err(Error::InvalidInput("logits have no category columns".into()));
    }
    let tau = cfg.tau(scene.domain);
    let gt = scene.annotated_boxes();
    let mut mined: Vec<MinedProposal> = scene
        .proposals
        .iter()
        .enumerate()
        .filter(|(i, p)| {
            p.objectness > tau
                && scene.training_label(*i).is_none()
                && gt.iter().all(|g| iou(g, &p.bbox) == 0.0)
        })
        .map(|(i, p)| MinedProposal {
            proposal: i,
            pseudo_label: argmax(logits.row(i)),
            confidence: p.objectness,
            domain: scene.domain,
        })
        .collect();
    // Stable sort keeps index order among equal objectness.
    mined.sort_by(|a, b| b.confidence.total_cmp(&a.confidence));
    mined.truncate(cfg.max_mined_per_scene);
    Ok(mined)
}

pub(crate) fn argmax(row: &[f64]) -> usize {
    row.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
        .0
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthworld::{BBox, GtObject, Proposal};

    fn proposal(x: f64, objectness: f64, matched_gt: Option<usize>) -> Proposal {
        Proposal {
            bbox: BBox::new(x, 0.0, x + 10.0, 10.0).unwrap(),
            feature: vec![0.0; 2],
            objectness,
            matched_gt,
        }
    }

    fn scene_with(proposals: Vec<Proposal>) -> Scene {
        Scene {
            domain: Domain::Source,
            objects: vec![GtObject {
                bbox: BBox::new(0.0, 0.0, 10.0, 10.0).unwrap(),
                category: 0,
                annotated: true,
                corrupted_from: None,
            }],
            proposals,
        }
    }

    #[test]
    fn empty_scene_mines_nothing() {
        let s = scene_with(vec![]);
        assert!(mine(&s, &Matrix::zeros(0, 3), &PimConfig::default()).unwrap().is_empty());
    }

    #[test]
    fn any_overlap_excludes() {
        // 9.9 → 10 overlap of 0.1 × 10 with the GT box: tiny but nonzero IoU.
        let s = scene_with(vec![proposal(9.9, 0.99, None), proposal(30.0, 0.99, None)]);
        let m = mine(&s, &Matrix::zeros(2, 3), &PimConfig::default()).unwrap();
        assert_eq!(m.len(), 1);
        assert_eq!(m[0].proposal, 1);
    }

    #[test]
    fn threshold_is_strict() {
        let s = scene_with(vec![proposal(30.0, 0.9, None), proposal(50.0, 0.90001, None)]);
        let m = mine(&s, &Matrix::zeros(2, 3), &PimConfig::default()).unwrap();
        assert_eq!(m.iter().map(|p| p.proposal).collect::<Vec<_>>(), vec![1]);
    }

    #[test]
    fn cap_keeps_highest_objectness() {
        let props = (0..5).map(|i| proposal(20.0 + 12.0 * i as f64, 0.91 + 0.01 * i as f64, None)).collect();
        let s = scene_with(props);
        let cfg = PimConfig {
            max_mined_per_scene: 2,
            ..PimConfig::default()
        };
        let m = mine(&s, &Matrix::zeros(5, 3), &cfg).unwrap();
        assert_eq!(m.iter().map(|p| p.proposal).collect::<Vec<_>>(), vec![4, 3]);
    }

    #[test]
    fn pseudo_label_is_argmax_and_shape_checked() {
        let s = scene_with(vec![proposal(30.0, 0.95, None)]);
        let logits = Matrix::from_vec(1, 3, vec![0.1, 2.0, -1.0]).unwrap();
        assert_eq!(mine(&s, &logits, &PimConfig::default()).unwrap()[0].pseudo_label, 1);
        assert!(mine(&s, &Matrix::zeros(2, 3), &PimConfig::default()).is_err());
    }

    #[test]
    fn rejects_thresholds_outside_unit_interval() {
        for t in [0.0, 1.0, -0.5] {
            let cfg = PimConfig {
                tau_source: t,
                ..PimConfig::default()
            };
            assert!(cfg.validate().is_err());
        }
    }
}
