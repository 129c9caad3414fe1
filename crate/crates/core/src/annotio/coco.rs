//! A COCO-like JSON interchange format (boxes and class labels only).

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CocoImage {
    pub id: u64,
    pub file_name: String,
    pub width: u32,
    pub height: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CocoAnnotation {
    pub id: u64,
    pub image_id: u64,
    pub category_id: u64,
    /// `[x, y, width, height]`.
    pub bbox: [f64; 4],
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CocoCategory {
    pub id: u64,
    pub name: String,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CocoLikeDoc {
    pub images: Vec<CocoImage>,
    pub annotations: Vec<CocoAnnotation>,
    pub categories: Vec<CocoCategory>,
}

fn unique_ids(kind: &str, ids: impl Iterator<Item = u64>) -> Result<HashSet<u64>> {
    let mut seen = HashSet::new();
    for id in ids {
        if !seen.insert(id) {
            return Err(Error::Schema(format!("duplicate {kind} id {id}")));
        }
    }
    Ok(seen)
}

impl CocoLikeDoc {
    /// Ids are unique per table and every annotation references an existing
    /// image and category.
    pub fn validate(&self) -> Result<()> {
        let images = unique_ids("image", self.images.iter().map(|i| i.id))?;
        let categories = unique_ids("category", self.categories.iter().map(|c| c.id))?;
        unique_ids("annotation", self.annotations.iter().map(|a| a.id))?;
        let mut names = HashSet::new();
        for c in &self.categories {
            if c.name.trim().is_empty() {
                return Err(Error::Schema(format!("category {} has an empty name", c.id)));
            }
            if !names.insert(c.name.as_str()) {
                return Err(Error::Schema(format!("duplicate category name `{}`", c.name)));
            }
        }
        for a in &self.annotations {
            if !images.contains(&a.image_id) {
                return Err(Error::Schema(format!("annotation {} references missing image {}", a.id, a.image_id)));
            }
            if !categories.contains(&a.category_id) {
                return Err(Error::Schema(format!(
                    "annotation {} references missing category {}",
                    a.id, a.category_id
                )));
            }
            if a.bbox.iter().any(|v| !v.is_finite()) || a.bbox[2] < 0.0 || a.bbox[3] < 0.0 {
                return Err(Error::Schema(format!("annotation {} has an invalid bbox", a.id)));
            }
        }
        Ok(())
    }

    pub fn category_name(&self, id: u64) -> Option<&str> {
        self.categories.iter().find(|c| c.id == id).map(|c| c.name.as_str())
    }

    pub fn image_file(&self, id: u64) -> Option<&str> {
        self.images.iter().find(|i| i.id == id).map(|i| i.file_name.as_str())
    }
}

pub fn parse_coco(text: &str) -> Result<CocoLikeDoc> {
    let doc: CocoLikeDoc = serde_json::from_str(text).map_err(|e| Error::Parse {
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    })?;
    doc.validate()?;
    Ok(doc)
}

pub fn write_coco(doc: &CocoLikeDoc) -> Result<String> {
    let mut s = serde_json::to_string_pretty(doc)?;
    s.push('\n');
    Ok(s)
}
