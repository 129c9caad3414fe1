//! Pascal-VOC style XML annotations.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::xml::{self, Element};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PixelBox {
    pub xmin: i64,
    pub ymin: i64,
    pub xmax: i64,
    pub ymax: i64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VocObject {
    pub name: String,
    pub bndbox: PixelBox,
    pub difficult: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VocDoc {
    pub filename: String,
    pub width: i64,
    pub height: i64,
    /// Channel count, when the source file states one.
    pub depth: Option<i64>,
    pub objects: Vec<VocObject>,
}

impl VocDoc {
    /// Names must be non-empty and boxes ordered and inside the image.
    pub fn validate(&self) -> Result<()> {
        if self.width <= 0 || self.height <= 0 {
            return Err(Error::Schema(format!(
                "{}: image size {}x{} is not positive",
                self.filename, self.width, self.height
            )));
        }
        for (i, o) in self.objects.iter().enumerate() {
            if o.name.trim().is_empty() {
                return Err(Error::Schema(format!("{}: object {i} has an empty name", self.filename)));
            }
            let b = o.bndbox;
            let inside = 0 <= b.xmin && b.xmin <= b.xmax && b.xmax <= self.width && 0 <= b.ymin && b.ymin <= b.ymax && b.ymax <= self.height;
            if !inside {
                return Err(Error::Schema(format!(
                    "{}: object {i} box ({}, {}, {}, {}) lies outside the {}x{} image",
                    self.filename, b.xmin, b.ymin, b.xmax, b.ymax, self.width, self.height
                )));
            }
        }
        Ok(())
    }
}

fn required<'a>(el: &'a Element, name: &str, path: &str) -> Result<&'a Element> {
    el.child(name)
        .ok_or_else(|| Error::Schema(format!("missing element `{path}/{name}` (line {})", el.line)))
}

fn integer(el: &Element, name: &str, path: &str) -> Result<i64> {
    let c = required(el, name, path)?;
    c.text.parse().map_err(|_| {
        Error::Schema(format!(
            "element `{path}/{name}` at line {} holds `{}`, not an integer",
            c.line, c.text
        ))
    })
}

/// Reads one annotation document. Elements other than filename, size and
/// object (and, inside objects, name, bndbox and difficult) are ignored.
pub fn parse_voc(text: &str) -> Result<VocDoc> {
    let root = xml::parse(text)?;
    if root.name != "annotation" {
        return Err(Error::Schema(format!("root element is `{}`, expected `annotation`", root.name)));
    }
    let filename = required(&root, "filename", "annotation")?.text.clone();
    let size = required(&root, "size", "annotation")?;
    let width = integer(size, "width", "annotation/size")?;
    let height = integer(size, "height", "annotation/size")?;
    let depth = size.child("depth").map(|_| integer(size, "depth", "annotation/size")).transpose()?;
    let mut objects = Vec::new();
    for o in root.children_named("object") {
        let name = required(o, "name", "annotation/object")?.text.clone();
        let b = required(o, "bndbox", "annotation/object")?;
        let path = "annotation/object/bndbox";
        let bndbox = PixelBox {
            xmin: integer(b, "xmin", path)?,
            ymin: integer(b, "ymin", path)?,
            xmax: integer(b, "xmax", path)?,
            ymax: integer(b, "ymax", path)?,
        };
        let difficult = match o.child("difficult").map(|d| d.text.as_str()) {
            None | Some("0") => false,
            Some("1") => true,
            Some(other) => {
                return Err(Error::Schema(format!(
                    "element `annotation/object/difficult` holds `{other}`, expected 0 or 1"
                )))
            }
        };
        objects.push(VocObject { name, bndbox, difficult });
    }
    let doc = VocDoc {
        filename,
        width,
        height,
        depth,
        objects,
    };
    doc.validate()?;
    Ok(doc)
}

/// Canonical text: filename, size, then objects, two-space indentation.
pub fn write_voc(doc: &VocDoc) -> String {
    let mut s = String::from("<annotation>\n");
    let _ = writeln!(s, "  <filename>{}</filename>", xml::escape(&doc.filename));
    s.push_str("  <size>\n");
    let _ = writeln!(s, "    <width>{}</width>", doc.width);
    let _ = writeln!(s, "    <height>{}</height>", doc.height);
    if let Some(d) = doc.depth {
        let _ = writeln!(s, "    <depth>{d}</depth>");
    }
    s.push_str("  </size>\n");
    for o in &doc.objects {
        s.push_str("  <object>\n");
        let _ = writeln!(s, "    <name>{}</name>", xml::escape(&o.name));
        let _ = writeln!(s, "    <difficult>{}</difficult>", u8::from(o.difficult));
        s.push_str("    <bndbox>\n");
        let b = o.bndbox;
        let _ = writeln!(s, "      <xmin>{}</xmin>", b.xmin);
        let _ = writeln!(s, "      <ymin>{}</ymin>", b.ymin);
        let _ = writeln!(s, "      <xmax>{}</xmax>", b.xmax);
        let _ = writeln!(s, "      <ymax>{}</ymax>", b.ymax);
        s.push_str("    </bndbox>\n");
        s.push_str("  </object>\n");
    }
    s.push_str("</annotation>\n");
    s
}
