//! `scene.v1` JSON view of a scene.
//!
//! ```json
//! { "schema": "scene.v1", "domain": "source",
//!   "objects":   [{"box": [x1, y1, x2, y2], "category": 2, "annotated": true}],
//!   "proposals": [{"box": [x1, y1, x2, y2], "feature": [..], "objectness": 0.93}] }
//! ```

use serde::{Deserialize, Serialize};

use super::{BBox, Domain, Scene};

pub const SCENE_SCHEMA: &str = "scene.v1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneDoc {
    pub schema: String,
    pub domain: Domain,
    pub objects: Vec<ObjectDoc>,
    pub proposals: Vec<ProposalDoc>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObjectDoc {
    #[serde(rename = "box")]
    pub bbox: BBox,
    pub category: usize,
    pub annotated: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProposalDoc {
    #[serde(rename = "box")]
    pub bbox: BBox,
    pub feature: Vec<f64>,
    pub objectness: f64,
}

impl From<&Scene> for SceneDoc {
    fn from(s: &Scene) -> Self {
        Self {
            schema: SCENE_SCHEMA.to_string(),
            domain: s.domain,
            objects: s
                .objects
                .iter()
                .map(|o| ObjectDoc {
                    bbox: o.bbox,
                    category: o.category,
                    annotated: o.annotated,
                })
                .collect(),
            proposals: s
                .proposals
                .iter()
                .map(|p| ProposalDoc {
                    bbox: p.bbox,
                    feature: p.feature.clone(),
                    objectness: p.objectness,
                })
                .collect(),
        }
    }
}
