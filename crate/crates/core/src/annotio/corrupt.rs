//! Label corruption for annotation datasets.
//!
//! One global sampling pass over every object of every document picks
//! exactly `floor(rho * N)` objects. Each picked object is renamed to one of
//! the other categories of the universe or removed, all outcomes equally
//! likely. Boxes and every other field stay untouched.

use std::collections::BTreeSet;
use std::io::Write;

use rand::seq::index;
use serde::{Deserialize, Serialize};

use super::coco::CocoLikeDoc;
use super::voc::VocDoc;
use crate::rng::{purpose, stream};
use crate::synthworld::{noise_count, substitute};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotationChange {
    pub file: String,
    /// Position of the object in the uncorrupted file.
    pub object_index: usize,
    pub old_label: String,
    /// `None` when the object was removed.
    pub new_label: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotationLog {
    pub changes: Vec<AnnotationChange>,
    /// Files that lost every object. They are still written out.
    pub emptied: Vec<String>,
}

impl AnnotationLog {
    /// Columns `file,object_index,old_label,new_label_or_REMOVED`. Emptied
    /// files follow as `file,-,-,EMPTIED` rows.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["file", "object_index", "old_label", "new_label_or_REMOVED"])?;
        for c in &self.changes {
            w.write_record([
                c.file.as_str(),
                &c.object_index.to_string(),
                &c.old_label,
                c.new_label.as_deref().unwrap_or("REMOVED"),
            ])?;
        }
        for f in &self.emptied {
            w.write_record([f.as_str(), "-", "-", "EMPTIED"])?;
        }
        w.flush().map_err(|e| Error::io("<corruption log>", e))?;
        Ok(())
    }
}

pub const VOC_CATEGORIES: [&str; 20] = [
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

pub fn voc_universe() -> Vec<String> {
    VOC_CATEGORIES.iter().map(|s| s.to_string()).collect()
}

/// Picks the objects to corrupt and their new labels. `labels[f][o]` is the
/// category index of object `o` in file `f` and `sizes[f]` the size of that
/// file's universe. Returns `(file, object, new label or None)` in file and
/// object order.
fn plan(labels: &[Vec<usize>], sizes: &[usize], rho: f64, seed: u64) -> Result<Vec<(usize, usize, Option<usize>)>> {
    if !(0.0..=1.0).contains(&rho) {
        return Err(Error::InvalidInput(format!("noise rate {rho} outside [0, 1]")));
    }
    let objects: Vec<(usize, usize)> = labels
        .iter()
        .enumerate()
        .flat_map(|(f, l)| (0..l.len()).map(move |o| (f, o)))
        .collect();
    let count = noise_count(rho, objects.len());
    let mut rng = stream(seed, purpose::ANNOTATION_NOISE, 0);
    let mut chosen = index::sample(&mut rng, objects.len(), count).into_vec();
    chosen.sort_unstable();
    Ok(chosen
        .into_iter()
        .map(|k| {
            let (f, o) = objects[k];
            (f, o, substitute(&mut rng, labels[f][o], sizes[f], true))
        })
        .collect())
}

fn check_universe(universe: &[String]) -> Result<()> {
    if universe.len() < 2 {
        return Err(Error::InvalidInput("category universe needs at least two names".into()));
    }
    let distinct: BTreeSet<&String> = universe.iter().collect();
    if distinct.len() != universe.len() {
        return Err(Error::InvalidInput("category universe has duplicate names".into()));
    }
    Ok(())
}

/// Corrupts VOC documents. Every object name must belong to `universe`.
pub fn corrupt_annotations(docs: &[VocDoc], universe: &[String], rho: f64, seed: u64) -> Result<(Vec<VocDoc>, AnnotationLog)> {
    check_universe(universe)?;
    let mut unknown = BTreeSet::new();
    let labels: Vec<Vec<usize>> = docs
        .iter()
        .map(|d| {
            d.objects
                .iter()
                .map(|o| {
                    universe.iter().position(|u| *u == o.name).unwrap_or_else(|| {
                        unknown.insert(o.name.clone());
                        0
                    })
                })
                .collect()
        })
        .collect();
    if !unknown.is_empty() {
        let names: Vec<String> = unknown.into_iter().collect();
        return Err(Error::InvalidInput(format!(
            "object names outside the category universe: {}",
            names.join(", ")
        )));
    }
    let picks = plan(&labels, &vec![universe.len(); docs.len()], rho, seed)?;

    let mut out = docs.to_vec();
    let mut removed = vec![Vec::new(); docs.len()];
    let mut log = AnnotationLog::default();
    for (f, o, new) in picks {
        let old_label = docs[f].objects[o].name.clone();
        match new {
            Some(c) => out[f].objects[o].name = universe[c].clone(),
            None => removed[f].push(o),
        }
        log.changes.push(AnnotationChange {
            file: docs[f].filename.clone(),
            object_index: o,
            old_label,
            new_label: new.map(|c| universe[c].clone()),
        });
    }
    for (doc, gone) in out.iter_mut().zip(&removed) {
        if gone.is_empty() {
            continue;
        }
        let mut i = 0;
        doc.objects.retain(|_| {
            i += 1;
            !gone.contains(&(i - 1))
        });
        if doc.objects.is_empty() {
            log.emptied.push(doc.filename.clone());
        }
    }
    Ok((out, log))
}

/// Corrupts COCO-like documents, one global pass over all annotations. Each
/// document's own category table is its universe. Log rows name the image
/// file and the annotation's position among that image's annotations.
pub fn corrupt_coco(docs: &[CocoLikeDoc], rho: f64, seed: u64) -> Result<(Vec<CocoLikeDoc>, AnnotationLog)> {
    for d in docs {
        d.validate()?;
        if d.categories.len() < 2 && !d.annotations.is_empty() {
            return Err(Error::InvalidInput("a document needs at least two categories to relabel".into()));
        }
    }
    let labels: Vec<Vec<usize>> = docs
        .iter()
        .map(|d| {
            d.annotations
                .iter()
                .map(|a| d.categories.iter().position(|c| c.id == a.category_id).unwrap_or(0))
                .collect()
        })
        .collect();
    let sizes: Vec<usize> = docs.iter().map(|d| d.categories.len()).collect();
    let picks = plan(&labels, &sizes, rho, seed)?;

    let mut out = docs.to_vec();
    let mut removed = vec![Vec::new(); docs.len()];
    let mut log = AnnotationLog::default();
    for (f, a, new) in picks {
        let doc = &docs[f];
        let ann = &doc.annotations[a];
        let position = doc.annotations[..a].iter().filter(|x| x.image_id == ann.image_id).count();
        match new {
            Some(c) => out[f].annotations[a].category_id = doc.categories[c].id,
            None => removed[f].push(a),
        }
        log.changes.push(AnnotationChange {
            file: doc.image_file(ann.image_id).unwrap_or_default().to_string(),
            object_index: position,
            old_label: doc.categories[labels[f][a]].name.clone(),
            new_label: new.map(|c| doc.categories[c].name.clone()),
        });
    }
    for ((doc, orig), gone) in out.iter_mut().zip(docs).zip(&removed) {
        if gone.is_empty() {
            continue;
        }
        let mut i = 0;
        doc.annotations.retain(|_| {
            i += 1;
            !gone.contains(&(i - 1))
        });
        for img in &orig.images {
            let before = orig.annotations.iter().any(|a| a.image_id == img.id);
            let after = doc.annotations.iter().any(|a| a.image_id == img.id);
            if before && !after {
                log.emptied.push(img.file_name.clone());
            }
        }
    }
    Ok((out, log))
}
