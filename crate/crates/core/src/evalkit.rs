//! Detection evaluation: greedy NMS, VOC-style average precision and the
//! three-way error taxonomy of highly confident detections.

use std::cmp::Ordering;
use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::synthworld::{iou, BBox};
use crate::{Error, Result};

/// IoU bands of the error taxonomy.
pub const CORRECT_IOU: f64 = 0.5;
pub const MISLOCALIZED_IOU: f64 = 0.3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub image: usize,
    #[serde(rename = "box")]
    pub bbox: BBox,
    pub category: usize,
    pub score: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub image: usize,
    #[serde(rename = "box")]
    pub bbox: BBox,
    pub category: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ApMode {
    /// Area under the interpolated precision envelope at every recall step.
    #[default]
    AllPoint,
    /// Mean of the interpolated precision at recall 0, 0.1, ..., 1.
    ElevenPoint,
}

/// Descending score; ties go to the lower `x1`, then lower `y1`.
fn score_order(a: &Detection, b: &Detection) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then(a.bbox.x1.total_cmp(&b.bbox.x1))
        .then(a.bbox.y1.total_cmp(&b.bbox.y1))
}

/// Greedy per-image, per-category suppression. A detection is dropped when
/// its IoU with an already kept one exceeds `iou_threshold`.
pub fn nms(detections: &[Detection], iou_threshold: f64) -> Vec<Detection> {
    let mut sorted = detections.to_vec();
    sorted.sort_by(score_order);
    let mut kept_by_group: HashMap<(usize, usize), Vec<BBox>> = HashMap::new();
    let mut kept: Vec<Detection> = Vec::with_capacity(sorted.len());
    for d in sorted {
        let group = kept_by_group.entry((d.image, d.category)).or_default();
        if group.iter().all(|k| iou(k, &d.bbox) <= iou_threshold) {
            group.push(d.bbox);
            kept.push(d);
        }
    }
    kept
}

/// Average precision of one category, or `None` when it has no ground truth.
///
/// Detections and ground truth of other categories are ignored. Matching is
/// greedy by descending score; each ground-truth box is matched at most once.
pub fn average_precision(
    detections: &[Detection],
    ground_truth: &[GroundTruth],
    category: usize,
    iou_threshold: f64,
    mode: ApMode,
) -> Option<f64> {
    let gts: Vec<&GroundTruth> = ground_truth.iter().filter(|g| g.category == category).collect();
    if gts.is_empty() {
        return None;
    }
    let mut dets: Vec<Detection> = detections
        .iter()
        .filter(|d| d.category == category)
        .copied()
        .collect();
    dets.sort_by(score_order);

    let mut by_image: HashMap<usize, Vec<usize>> = HashMap::new();
    for (i, g) in gts.iter().enumerate() {
        by_image.entry(g.image).or_default().push(i);
    }
    let mut matched = vec![false; gts.len()];
    let mut tp = Vec::with_capacity(dets.len());
    for d in &dets {
        let best = by_image
            .get(&d.image)
            .into_iter()
            .flatten()
            .map(|&i| (i, iou(&gts[i].bbox, &d.bbox)))
            .max_by(|a, b| a.1.total_cmp(&b.1).then(b.0.cmp(&a.0)));
        let hit = match best {
            Some((i, overlap)) if overlap >= iou_threshold && !matched[i] => {
                matched[i] = true;
                true
            }
            _ => false,
        };
        tp.push(hit);
    }
    let (recall, precision) = pr_curve(&tp, gts.len());
    Some(match mode {
        ApMode::AllPoint => all_point_ap(&recall, &precision),
        ApMode::ElevenPoint => eleven_point_ap(&recall, &precision),
    })
}

/// Cumulative recall and precision after each ranked detection.
pub fn pr_curve(true_positive: &[bool], num_gt: usize) -> (Vec<f64>, Vec<f64>) {
    let mut tp = 0usize;
    let mut recall = Vec::with_capacity(true_positive.len());
    let mut precision = Vec::with_capacity(true_positive.len());
    for (k, &hit) in true_positive.iter().enumerate() {
        if hit {
            tp += 1;
        }
        recall.push(tp as f64 / num_gt as f64);
        precision.push(tp as f64 / (k + 1) as f64);
    }
    (recall, precision)
}

pub fn all_point_ap(recall: &[f64], precision: &[f64]) -> f64 {
    let mut mrec = Vec::with_capacity(recall.len() + 2);
    mrec.push(0.0);
    mrec.extend_from_slice(recall);
    mrec.push(1.0);
    let mut mpre = Vec::with_capacity(precision.len() + 2);
    mpre.push(0.0);
    mpre.extend_from_slice(precision);
    mpre.push(0.0);
    for i in (0..mpre.len() - 1).rev() {
        mpre[i] = mpre[i].max(mpre[i + 1]);
    }
    (1..mrec.len())
        .filter(|&i| mrec[i] != mrec[i - 1])
        .map(|i| (mrec[i] - mrec[i - 1]) * mpre[i])
        .sum()
}

pub fn eleven_point_ap(recall: &[f64], precision: &[f64]) -> f64 {
    (0..=10)
        .map(|t| {
            let t = t as f64 / 10.0;
            recall
                .iter()
                .zip(precision)
                .filter(|(&r, _)| r >= t)
                .map(|(_, &p)| p)
                .fold(0.0, f64::max)
        })
        .sum::<f64>()
        / 11.0
}

/// Mean over the categories whose AP is defined.
pub fn mean_ap(per_category: &[Option<f64>]) -> Result<f64> {
    let defined: Vec<f64> = per_category.iter().flatten().copied().collect();
    if defined.is_empty() {
        return Err(Error::InvalidInput("no category has ground truth".into()));
    }
    Ok(defined.iter().sum::<f64>() / defined.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct TaxonomyCounts {
    pub correct: usize,
    pub mislocalized: usize,
    pub background: usize,
}

impl TaxonomyCounts {
    pub fn total(&self) -> usize {
        self.correct + self.mislocalized + self.background
    }

    /// Fractions `(correct, mislocalized, background)`; `None` when empty.
    pub fn fractions(&self) -> Option<(f64, f64, f64)> {
        let n = self.total();
        (n > 0).then(|| {
            let n = n as f64;
            (
                self.correct as f64 / n,
                self.mislocalized as f64 / n,
                self.background as f64 / n,
            )
        })
    }
}

/// Bin by best IoU against same-category ground truth in the same image.
pub fn classify_overlap(best_iou: f64, counts: &mut TaxonomyCounts) {
    if best_iou >= CORRECT_IOU {
        counts.correct += 1;
    } else if best_iou >= MISLOCALIZED_IOU {
        counts.mislocalized += 1;
    } else {
        counts.background += 1;
    }
}

/// For every category, the top-`k` detections by score (with `k` the
/// category's ground-truth count) binned into correct / mis-localized /
/// background.
pub fn error_taxonomy(
    detections: &[Detection],
    ground_truth: &[GroundTruth],
    categories: usize,
) -> Vec<TaxonomyCounts> {
    (0..categories)
        .map(|c| {
            let gts: Vec<&GroundTruth> = ground_truth.iter().filter(|g| g.category == c).collect();
            let mut dets: Vec<Detection> = detections.iter().filter(|d| d.category == c).copied().collect();
            dets.sort_by(score_order);
            dets.truncate(gts.len());
            let mut counts = TaxonomyCounts::default();
            for d in &dets {
                let best = gts
                    .iter()
                    .filter(|g| g.image == d.image)
                    .map(|g| iou(&g.bbox, &d.bbox))
                    .fold(0.0, f64::max);
                classify_overlap(best, &mut counts);
            }
            counts
        })
        .collect()
}

/// Per-category AP, mAP and taxonomy for one detection set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub per_category_ap: Vec<Option<f64>>,
    pub map: f64,
    pub taxonomy: Vec<TaxonomyCounts>,
    /// Taxonomy fractions averaged over categories that have detections.
    pub taxonomy_mean_fractions: TaxonomyFractions,
    pub nms_iou: f64,
    pub ap_mode: ApMode,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct TaxonomyFractions {
    pub correct: f64,
    pub mislocalized: f64,
    pub background: f64,
    pub averaging: Averaging,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Averaging {
    #[default]
    PerCategory,
}

/// NMS, then AP at IoU 0.5 and the error taxonomy.
pub fn evaluate(
    detections: &[Detection],
    ground_truth: &[GroundTruth],
    categories: usize,
    nms_iou: f64,
    ap_mode: ApMode,
) -> Result<EvalReport> {
    let kept = nms(detections, nms_iou);
    let per_category_ap: Vec<Option<f64>> = (0..categories)
        .map(|c| average_precision(&kept, ground_truth, c, CORRECT_IOU, ap_mode))
        .collect();
    let map = mean_ap(&per_category_ap)?;
    let taxonomy = error_taxonomy(&kept, ground_truth, categories);
    let fr: Vec<(f64, f64, f64)> = taxonomy.iter().filter_map(|t| t.fractions()).collect();
    let mut mean = TaxonomyFractions::default();
    if !fr.is_empty() {
        let n = fr.len() as f64;
        mean.correct = fr.iter().map(|f| f.0).sum::<f64>() / n;
        mean.mislocalized = fr.iter().map(|f| f.1).sum::<f64>() / n;
        mean.background = fr.iter().map(|f| f.2).sum::<f64>() / n;
    }
    Ok(EvalReport {
        per_category_ap,
        map,
        taxonomy,
        taxonomy_mean_fractions: mean,
        nms_iou,
        ap_mode,
    })
}
