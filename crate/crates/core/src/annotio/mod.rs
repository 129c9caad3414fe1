//! Reading, writing and corrupting annotation files.
//!
//! Two formats are supported: Pascal-VOC style XML (one file per image) and
//! a COCO-like JSON document. Corruption applies the same protocol as the
//! synthetic label noise, with a global count over the whole dataset.

mod coco;
mod corrupt;
mod voc;
pub mod xml;

use std::fs;
use std::path::{Path, PathBuf};

pub use coco::{parse_coco, write_coco, CocoAnnotation, CocoCategory, CocoImage, CocoLikeDoc};
pub use corrupt::{corrupt_annotations, corrupt_coco, voc_universe, AnnotationChange, AnnotationLog, VOC_CATEGORIES};
pub use voc::{parse_voc, write_voc, PixelBox, VocDoc, VocObject};

use crate::{Error, Result};

/// Files in `dir` with the given extension, sorted by name.
pub fn list_files(dir: &Path, extension: &str) -> Result<Vec<PathBuf>> {
    let mut files = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.is_file() && path.extension().is_some_and(|x| x == extension) {
            files.push(path);
        }
    }
    files.sort();
    Ok(files)
}

pub fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}
