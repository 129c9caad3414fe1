//! Independent oracles and fixture builders shared by the integration tests.

#![allow(dead_code)]

use noisy_adapt::diffcore::Matrix;
use noisy_adapt::evalkit::{Detection, GroundTruth};
use noisy_adapt::pim::{MinedProposal, PimConfig};
use noisy_adapt::synthworld::{BBox, Domain, GtObject, Proposal, Scene};
use rand::Rng;

/// Positive-area overlap test written from the box coordinates directly.
pub fn boxes_intersect(a: &BBox, b: &BBox) -> bool {
    a.x1.max(b.x1) < a.x2.min(b.x2) && a.y1.max(b.y1) < a.y2.min(b.y2)
}

/// Area of intersection over area of union, computed by explicit cases.
pub fn overlap(a: &BBox, b: &BBox) -> f64 {
    if !boxes_intersect(a, b) {
        return 0.0;
    }
    let iw = a.x2.min(b.x2) - a.x1.max(b.x1);
    let ih = a.y2.min(b.y2) - a.y1.max(b.y1);
    let inter = iw * ih;
    let area = |r: &BBox| (r.x2 - r.x1) * (r.y2 - r.y1);
    inter / (area(a) + area(b) - inter)
}

/// Integer-aligned box so that touching edges (zero overlap) are common.
pub fn random_box<R: Rng>(rng: &mut R, extent: i32) -> BBox {
    let x1 = rng.random_range(0..extent - 1);
    let y1 = rng.random_range(0..extent - 1);
    let x2 = rng.random_range(x1 + 1..=extent);
    let y2 = rng.random_range(y1 + 1..=extent);
    BBox::new(x1 as f64, y1 as f64, x2 as f64, y2 as f64).unwrap()
}

/// A scene with random objects (some unannotated) and `proposals`
/// proposals, about a third of them spawned by objects. Objectness values
/// are quantized so exact ties occur.
pub fn random_scene<R: Rng>(rng: &mut R, domain: Domain, proposals: usize) -> Scene {
    let objects: Vec<GtObject> = (0..rng.random_range(0..6))
        .map(|_| GtObject {
            bbox: random_box(rng, 40),
            category: rng.random_range(0..4),
            annotated: rng.random_bool(0.7),
            corrupted_from: None,
        })
        .collect();
    let proposals = (0..proposals)
        .map(|_| {
            let matched_gt = (!objects.is_empty() && rng.random_bool(0.3)).then(|| rng.random_range(0..objects.len()));
            let objectness = if rng.random_bool(0.5) {
                f64::from(rng.random_range(0..=20u32)) / 20.0
            } else {
                rng.random_range(0.0..=1.0)
            };
            Proposal {
                bbox: random_box(rng, 40),
                feature: vec![0.0; 2],
                objectness,
                matched_gt,
            }
        })
        .collect();
    Scene {
        domain,
        objects,
        proposals,
    }
}

/// Mining by exhaustive filtering: each proposal is checked against every
/// condition independently, then ranked by objectness with index order
/// breaking ties.
pub fn brute_force_mine(scene: &Scene, logits: &Matrix, cfg: &PimConfig) -> Vec<MinedProposal> {
    let tau = match scene.domain {
        Domain::Source => cfg.tau_source,
        Domain::Target => cfg.tau_target,
    };
    let mut keep = Vec::new();
    for (i, p) in scene.proposals.iter().enumerate() {
        if p.objectness <= tau {
            continue;
        }
        let mut visible = Vec::new();
        if scene.domain == Domain::Source {
            visible.extend(scene.objects.iter().enumerate().filter(|(_, o)| o.annotated));
        }
        if p.matched_gt.is_some_and(|m| visible.iter().any(|(j, _)| *j == m)) {
            continue;
        }
        if visible.iter().any(|(_, o)| boxes_intersect(&o.bbox, &p.bbox)) {
            continue;
        }
        let row = logits.row(i);
        let mut label = 0;
        for (k, &v) in row.iter().enumerate() {
            if v > row[label] {
                label = k;
            }
        }
        keep.push(MinedProposal {
            proposal: i,
            pseudo_label: label,
            confidence: p.objectness,
            domain: scene.domain,
        });
    }
    // Selection sort: repeatedly take the highest objectness, earliest index.
    let mut ranked = Vec::new();
    while !keep.is_empty() && ranked.len() < cfg.max_mined_per_scene {
        let mut best = 0;
        for k in 1..keep.len() {
            if keep[k].confidence > keep[best].confidence {
                best = k;
            }
        }
        ranked.push(keep.remove(best));
    }
    ranked
}

/// Greedy matching in descending score order: each detection takes its
/// best-overlap ground truth in the same image if the overlap reaches
/// `iou_thr` and that ground truth is still free. Returns the hit flag of
/// every ranked detection and which ground truths were taken.
pub fn greedy_match(ranked: &[&Detection], gts: &[&GroundTruth], iou_thr: f64) -> (Vec<bool>, Vec<bool>) {
    let mut taken = vec![false; gts.len()];
    let mut hits = Vec::new();
    for d in ranked {
        let mut best: Option<(usize, f64)> = None;
        for (j, g) in gts.iter().enumerate() {
            if g.image != d.image {
                continue;
            }
            let o = overlap(&g.bbox, &d.bbox);
            if best.is_none_or(|(_, b)| o > b) {
                best = Some((j, o));
            }
        }
        let hit = matches!(best, Some((j, o)) if o >= iou_thr && !taken[j]);
        if let (true, Some((j, _))) = (hit, best) {
            taken[j] = true;
        }
        hits.push(hit);
    }
    (hits, taken)
}

fn ranked(dets: &[Detection], category: usize) -> Vec<&Detection> {
    let mut r: Vec<&Detection> = dets.iter().filter(|d| d.category == category).collect();
    r.sort_by(|a, b| b.score.partial_cmp(&a.score).unwrap());
    r
}

/// Ground truths of `category` that no detection matches.
pub fn missed_ground_truth(dets: &[Detection], gts: &[GroundTruth], category: usize, iou_thr: f64) -> Vec<GroundTruth> {
    let gts: Vec<&GroundTruth> = gts.iter().filter(|g| g.category == category).collect();
    let (_, taken) = greedy_match(&ranked(dets, category), &gts, iou_thr);
    gts.iter().zip(taken).filter(|(_, t)| !t).map(|(g, _)| **g).collect()
}

/// All-point AP by enumeration: each true positive at rank k adds
/// `1/num_gt` times the best precision achieved at any rank ≥ k.
/// Detections must have distinct scores.
pub fn enumerated_ap(dets: &[Detection], gts: &[GroundTruth], category: usize, iou_thr: f64) -> Option<f64> {
    let gts: Vec<&GroundTruth> = gts.iter().filter(|g| g.category == category).collect();
    if gts.is_empty() {
        return None;
    }
    let (hits, _) = greedy_match(&ranked(dets, category), &gts, iou_thr);
    let precision: Vec<f64> = (0..hits.len())
        .map(|k| hits[..=k].iter().filter(|&&h| h).count() as f64 / (k + 1) as f64)
        .collect();
    let mut ap = 0.0;
    for k in 0..hits.len() {
        if hits[k] {
            let best = precision[k..].iter().cloned().fold(0.0, f64::max);
            ap += best / gts.len() as f64;
        }
    }
    Some(ap)
}

pub const VOC_NAMES: [&str; 20] = [
    "aeroplane",
    "bicycle",
    "bird",
    "boat",
    "bottle",
    "bus",
    "car",
    "cat",
    "chair",
    "cow",
    "diningtable",
    "dog",
    "horse",
    "motorbike",
    "person",
    "pottedplant",
    "sheep",
    "sofa",
    "train",
    "tvmonitor",
];

/// VOC-style XML written by hand with the extra elements real files carry
/// (folder, source, pose, truncated) and irregular whitespace.
pub fn voc_fixture<R: Rng>(rng: &mut R, index: usize, objects: usize) -> String {
    let (w, h) = (rng.random_range(100..640), rng.random_range(100..480));
    let mut s = format!(
        "<?xml version=\"1.0\"?>\n<annotation>\n\t<folder>VOC2012</folder>\n\t<filename>{index:06}.jpg</filename>\n\t<source><database>The VOC2012 Database</database></source>\n\t<size><width>{w}</width><height>{h}</height><depth>3</depth></size>\n\t<segmented>0</segmented>\n"
    );
    for _ in 0..objects {
        let x1 = rng.random_range(0..w - 1);
        let y1 = rng.random_range(0..h - 1);
        let x2 = rng.random_range(x1 + 1..=w);
        let y2 = rng.random_range(y1 + 1..=h);
        let name = VOC_NAMES[rng.random_range(0..20)];
        let difficult = u8::from(rng.random_bool(0.1));
        s.push_str(&format!(
            "\t<object>\n\t\t<name>{name}</name>\n\t\t<pose>Unspecified</pose>\n\t\t<truncated>0</truncated>\n\t\t<difficult>{difficult}</difficult>\n\t\t<bndbox>\n\t\t\t<xmin>{x1}</xmin>\n\t\t\t<ymin>{y1}</ymin>\n\t\t\t<xmax>{x2}</xmax>\n\t\t\t<ymax>{y2}</ymax>\n\t\t</bndbox>\n\t</object>\n"
        ));
    }
    s.push_str("</annotation>\n");
    s
}

/// Line-level comparison of two canonical VOC texts. Returns the number of
/// renamed and removed objects when the corrupted text differs from the
/// original only by `<name>` lines and whole removed `<object>` blocks.
pub fn name_and_removal_diff(original: &str, corrupted: &str) -> Result<(usize, usize), String> {
    fn split(text: &str) -> (Vec<&str>, Vec<Vec<&str>>) {
        let mut header = Vec::new();
        let mut objects: Vec<Vec<&str>> = Vec::new();
        let mut current: Option<Vec<&str>> = None;
        for line in text.lines() {
            let t = line.trim();
            match (t, current.as_mut()) {
                ("<object>", _) => current = Some(vec![line]),
                ("</object>", Some(block)) => {
                    block.push(line);
                    objects.push(current.take().unwrap());
                }
                (_, Some(block)) => block.push(line),
                (_, None) => header.push(line),
            }
        }
        (header, objects)
    }
    let (h0, o0) = split(original);
    let (h1, o1) = split(corrupted);
    if h0 != h1 {
        return Err("document header differs".into());
    }
    let (mut renamed, mut k) = (0, 0);
    for block in &o1 {
        // Advance through the original until a block matches outside names.
        loop {
            let Some(orig) = o0.get(k) else {
                return Err("corrupted object has no original counterpart".into());
            };
            k += 1;
            let same_shape = orig.len() == block.len()
                && orig
                    .iter()
                    .zip(block)
                    .all(|(a, b)| a == b || (a.trim().starts_with("<name>") && b.trim().starts_with("<name>")));
            if same_shape {
                if orig != block {
                    renamed += 1;
                }
                break;
            }
        }
    }
    Ok((renamed, o0.len() - o1.len()))
}
