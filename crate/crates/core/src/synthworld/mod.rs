//! Synthetic two-domain detection scenes at the proposal level.
//!
//! A [`Scene`] stands in for one image after the region-proposal stage: it
//! holds ground-truth objects and the proposals a detector would classify.
//! Source and target scenes share category structure but target features
//! pass through an affine domain-shift map.

mod config;
mod noise;
mod scene_json;

use rand::Rng;
use rand_distr::{Beta, Distribution, Normal};
use serde::{Deserialize, Serialize};

pub use config::{FeatureModel, ObjectnessModel, ScenarioConfig, ShiftModel, World};
pub(crate) use noise::substitute;
pub use noise::{inject_label_noise, noise_count, restore_labels, CorruptionEntry, CorruptionLog, NoiseOutcome};
pub use scene_json::{SceneDoc, SCENE_SCHEMA};

use crate::diffcore::sigmoid;
use crate::rng::{purpose, stream, StreamRng};
use crate::{Error, Result};

/// Axis-aligned box, `x1 < x2` and `y1 < y2`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(into = "[f64; 4]", try_from = "[f64; 4]")]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        if !(x1 < x2 && y1 < y2) || ![x1, y1, x2, y2].iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "invalid box [{x1}, {y1}, {x2}, {y2}]"
            )));
        }
        Ok(Self { x1, y1, x2, y2 })
    }

    pub fn area(&self) -> f64 {
        (self.x2 - self.x1) * (self.y2 - self.y1)
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }
}

impl From<BBox> for [f64; 4] {
    fn from(b: BBox) -> Self {
        [b.x1, b.y1, b.x2, b.y2]
    }
}

impl TryFrom<[f64; 4]> for BBox {
    type Error = Error;

    fn try_from(v: [f64; 4]) -> Result<Self> {
        BBox::new(v[0], v[1], v[2], v[3])
    }
}

/// Intersection over union.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let w = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let h = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = w * h;
    if inter == 0.0 {
        return 0.0;
    }
    let union = a.area() + b.area() - inter;
    (inter / union).clamp(0.0, 1.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Source,
    Target,
}

impl Domain {
    /// Label used by domain discriminators: 1 for source, 0 for target.
    pub fn label(self) -> f64 {
        match self {
            Domain::Source => 1.0,
            Domain::Target => 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GtObject {
    pub bbox: BBox,
    pub category: usize,
    /// Unannotated objects are invisible to the learner but still count
    /// for evaluation.
    pub annotated: bool,
    pub corrupted_from: Option<usize>,
}

impl GtObject {
    /// Category the object really belongs to.
    pub fn true_category(&self) -> usize {
        self.corrupted_from.unwrap_or(self.category)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Proposal {
    pub bbox: BBox,
    pub feature: Vec<f64>,
    pub objectness: f64,
    /// Object that spawned this proposal; `None` for background proposals.
    pub matched_gt: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub domain: Domain,
    pub objects: Vec<GtObject>,
    pub proposals: Vec<Proposal>,
}

impl Scene {
    /// Boxes of the objects the learner may see. Target scenes expose none.
    pub fn annotated_boxes(&self) -> Vec<BBox> {
        match self.domain {
            Domain::Target => Vec::new(),
            Domain::Source => self
                .objects
                .iter()
                .filter(|o| o.annotated)
                .map(|o| o.bbox)
                .collect(),
        }
    }

    /// Category a learner would train proposal `i` towards, or `None` when
    /// the proposal is background from the learner's point of view.
    pub fn training_label(&self, i: usize) -> Option<usize> {
        if self.domain == Domain::Target {
            return None;
        }
        let obj = &self.objects[self.proposals[i].matched_gt?];
        obj.annotated.then_some(obj.category)
    }

    pub fn validate(&self) -> Result<()> {
        for (i, p) in self.proposals.iter().enumerate() {
            if let Some(m) = p.matched_gt {
                if m >= self.objects.len() {
                    return Err(Error::InvalidInput(format!(
                        "proposal {i} matches missing object {m}"
                    )));
                }
            }
            if !(0.0..=1.0).contains(&p.objectness) {
                return Err(Error::InvalidInput(format!(
                    "proposal {i} objectness {} outside [0,1]",
                    p.objectness
                )));
            }
            if p.feature.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidInput(format!("proposal {i} feature not finite")));
            }
        }
        Ok(())
    }
}

/// Source and target scenes of one experiment plus the record of how the
/// source annotations were corrupted.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub world: World,
    pub source: Vec<Scene>,
    pub target: Vec<Scene>,
    pub corruption: CorruptionLog,
}

impl Dataset {
    pub fn generate(cfg: &ScenarioConfig) -> Result<Self> {
        let world = cfg.resolve()?;
        let source = (0..cfg.scenes_per_domain)
            .map(|i| {
                let mut rng = stream(cfg.seed, purpose::SOURCE_SCENE, i as u32);
                generate_scene_with(cfg, &world, Domain::Source, &mut rng)
            })
            .collect::<Result<Vec<_>>>()?;
        let target = (0..cfg.scenes_per_domain)
            .map(|i| {
                let mut rng = stream(cfg.seed, purpose::TARGET_SCENE, i as u32);
                generate_scene_with(cfg, &world, Domain::Target, &mut rng)
            })
            .collect::<Result<Vec<_>>>()?;
        let (source, corruption) = inject_label_noise(
            &source,
            cfg.noise_rate,
            cfg.seed,
            cfg.categories,
            cfg.background_in_noise,
        )?;
        Ok(Self {
            world,
            source,
            target,
            corruption,
        })
    }
}

/// One scene drawn from `rng`.
pub fn generate_scene(cfg: &ScenarioConfig, domain: Domain, rng: &mut StreamRng) -> Result<Scene> {
    let world = cfg.resolve()?;
    generate_scene_with(cfg, &world, domain, rng)
}

fn generate_scene_with<R: Rng + ?Sized>(
    cfg: &ScenarioConfig,
    world: &World,
    domain: Domain,
    rng: &mut R,
) -> Result<Scene> {
    let size = cfg.image_size;
    let unit = Normal::new(0.0, 1.0).expect("unit normal");
    let bg_objectness = Beta::new(cfg.objectness.background_alpha, cfg.objectness.background_beta)
        .map_err(|e| Error::Config(format!("background objectness: {e}")))?;

    let mut objects = Vec::with_capacity(cfg.objects_per_scene);
    let mut proposals = Vec::new();
    for obj_idx in 0..cfg.objects_per_scene {
        let category = rng.random_range(0..cfg.categories);
        let bbox = random_box(rng, size, cfg.object_size);
        objects.push(GtObject {
            bbox,
            category,
            annotated: true,
            corrupted_from: None,
        });
        for k in 0..cfg.proposals_per_object {
            let spread = 0.04 + 0.05 * k as f64;
            let (pbox, overlap) = jittered_box(rng, &bbox, spread, size);
            let raw = world.sample_category(category, rng, &unit);
            let feature = world.map_domain(raw, domain, rng, &unit);
            let o = &cfg.objectness;
            let objectness = sigmoid(o.slope * (overlap + o.jitter * unit.sample(rng) - o.midpoint));
            proposals.push(Proposal {
                bbox: pbox,
                feature,
                objectness,
                matched_gt: Some(obj_idx),
            });
        }
    }
    for _ in 0..cfg.background_per_scene {
        let bbox = random_box(rng, size, cfg.object_size);
        let raw = world.sample_background(rng, &unit);
        let feature = world.map_domain(raw, domain, rng, &unit);
        proposals.push(Proposal {
            bbox,
            feature,
            objectness: bg_objectness.sample(rng),
            matched_gt: None,
        });
    }
    Ok(Scene {
        domain,
        objects,
        proposals,
    })
}

fn random_box<R: Rng + ?Sized>(rng: &mut R, image: f64, (lo, hi): (f64, f64)) -> BBox {
    let w = rng.random_range(lo..hi);
    let h = rng.random_range(lo..hi);
    let x1 = rng.random_range(0.0..image - w);
    let y1 = rng.random_range(0.0..image - h);
    BBox {
        x1,
        y1,
        x2: x1 + w,
        y2: y1 + h,
    }
}

/// Perturbed copy of `gt` with IoU ≥ 0.5 against it, and that IoU.
fn jittered_box<R: Rng + ?Sized>(rng: &mut R, gt: &BBox, spread: f64, image: f64) -> (BBox, f64) {
    let normal = Normal::new(0.0, spread).expect("positive spread");
    let (w, h) = (gt.width(), gt.height());
    for _ in 0..64 {
        let x1 = (gt.x1 + w * normal.sample(rng)).clamp(0.0, image - 1.0);
        let y1 = (gt.y1 + h * normal.sample(rng)).clamp(0.0, image - 1.0);
        let x2 = (gt.x2 + w * normal.sample(rng)).clamp(x1 + 1.0, image);
        let y2 = (gt.y2 + h * normal.sample(rng)).clamp(y1 + 1.0, image);
        let b = BBox { x1, y1, x2, y2 };
        let overlap = iou(&b, gt);
        if overlap >= 0.5 {
            return (b, overlap);
        }
    }
    (*gt, 1.0)
}
