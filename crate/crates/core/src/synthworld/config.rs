use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::Domain;
use crate::diffcore::{norm, Matrix};
use crate::rng::{purpose, stream};
use crate::{Error, Result};

/// How per-category feature distributions are specified.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum FeatureModel {
    /// Category means are random directions of length `separation`, drawn
    /// from `world_seed`. All categories share the isotropic `std`.
    Random {
        separation: f64,
        std: f64,
        background_std: f64,
        world_seed: u64,
    },
    Explicit {
        means: Vec<Vec<f64>>,
        stds: Vec<f64>,
        background_mean: Vec<f64>,
        background_std: f64,
    },
}

/// Map from source feature space to target feature space:
/// `x ↦ A x + b + noise · ε`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ShiftModel {
    Identity {
        noise: f64,
    },
    /// `A = I + strength · G/√D` with Gaussian `G`, `b` a random direction of
    /// length `offset`; drawn from the feature model's world seed.
    RandomAffine {
        strength: f64,
        offset: f64,
        noise: f64,
    },
    Explicit {
        transform: Vec<Vec<f64>>,
        offset: Vec<f64>,
        noise: f64,
    },
}

/// Objectness of an object proposal is
/// `sigmoid(slope · (iou + jitter·ε − midpoint))`; background proposals draw
/// theirs from `Beta(background_alpha, background_beta)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObjectnessModel {
    pub slope: f64,
    pub midpoint: f64,
    pub jitter: f64,
    pub background_alpha: f64,
    pub background_beta: f64,
}

impl Default for ObjectnessModel {
    fn default() -> Self {
        Self {
            slope: 12.0,
            midpoint: 0.5,
            jitter: 0.1,
            background_alpha: 2.0,
            background_beta: 5.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScenarioConfig {
    pub categories: usize,
    pub feature_dim: usize,
    pub features: FeatureModel,
    pub shift: ShiftModel,
    pub scenes_per_domain: usize,
    pub objects_per_scene: usize,
    pub proposals_per_object: usize,
    pub background_per_scene: usize,
    pub image_size: f64,
    /// Side lengths of objects and background boxes are drawn from this range.
    pub object_size: (f64, f64),
    pub objectness: ObjectnessModel,
    /// Fraction of source instances whose label is corrupted.
    pub noise_rate: f64,
    /// Whether "background" is one of the substitution outcomes.
    pub background_in_noise: bool,
    pub seed: u64,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            categories: 5,
            feature_dim: 16,
            features: FeatureModel::Random {
                separation: 3.0,
                std: 1.0,
                background_std: 1.0,
                world_seed: 2022,
            },
            shift: ShiftModel::RandomAffine {
                strength: 0.6,
                offset: 1.5,
                noise: 0.3,
            },
            scenes_per_domain: 200,
            objects_per_scene: 4,
            proposals_per_object: 3,
            background_per_scene: 8,
            image_size: 100.0,
            object_size: (15.0, 40.0),
            objectness: ObjectnessModel::default(),
            noise_rate: 0.0,
            background_in_noise: true,
            seed: 0,
        }
    }
}

/// Concrete distributions behind a [`ScenarioConfig`].
#[derive(Debug, Clone, PartialEq)]
pub struct World {
    pub means: Matrix,
    pub stds: Vec<f64>,
    pub background_mean: Vec<f64>,
    pub background_std: f64,
    pub transform: Matrix,
    pub offset: Vec<f64>,
    pub shift_noise: f64,
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<()> {
        if self.categories < 2 {
            return Err(Error::Config("at least two categories are required".into()));
        }
        if self.feature_dim == 0 {
            return Err(Error::Config("feature_dim must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.noise_rate) {
            return Err(Error::Config(format!(
                "noise_rate {} outside [0, 1]",
                self.noise_rate
            )));
        }
        if self.proposals_per_object == 0 && self.objects_per_scene > 0 {
            return Err(Error::Config("each object must spawn at least one proposal".into()));
        }
        let (lo, hi) = self.object_size;
        if !(lo >= 1.0 && lo < hi && hi < self.image_size) {
            return Err(Error::Config(format!(
                "object_size ({lo}, {hi}) must satisfy 1 <= lo < hi < image_size"
            )));
        }
        let o = &self.objectness;
        if !(o.background_alpha > 0.0 && o.background_beta > 0.0 && o.jitter >= 0.0) {
            return Err(Error::Config("invalid objectness model".into()));
        }
        Ok(())
    }

    /// Materializes the feature and shift distributions.
    pub fn resolve(&self) -> Result<World> {
        self.validate()?;
        let (c, d) = (self.categories, self.feature_dim);
        let (means, stds, background_mean, background_std, world_seed) = match &self.features {
            FeatureModel::Random {
                separation,
                std,
                background_std,
                world_seed,
            } => {
                let mut rng = stream(*world_seed, purpose::WORLD, 0);
                let mut means = Matrix::zeros(c, d);
                for k in 0..c {
                    let dir = random_direction(&mut rng, d);
                    for (m, v) in means.row_mut(k).iter_mut().zip(dir) {
                        *m = separation * v;
                    }
                }
                (means, vec![*std; c], vec![0.0; d], *background_std, *world_seed)
            }
            FeatureModel::Explicit {
                means,
                stds,
                background_mean,
                background_std,
            } => {
                if means.len() != c || stds.len() != c || background_mean.len() != d {
                    return Err(Error::Config(
                        "explicit feature model does not match categories/feature_dim".into(),
                    ));
                }
                (
                    Matrix::from_rows(means, d)?,
                    stds.clone(),
                    background_mean.clone(),
                    *background_std,
                    0,
                )
            }
        };
        if stds.iter().chain([&background_std]).any(|s| !(*s > 0.0 && s.is_finite())) {
            return Err(Error::Config("degenerate covariance: standard deviations must be positive".into()));
        }

        let (transform, offset, shift_noise) = match &self.shift {
            ShiftModel::Identity { noise } => (Matrix::identity(d), vec![0.0; d], *noise),
            ShiftModel::RandomAffine {
                strength,
                offset,
                noise,
            } => {
                let mut rng = stream(world_seed, purpose::WORLD, 1);
                let normal = Normal::new(0.0, 1.0).expect("unit normal");
                let mut a = Matrix::identity(d);
                let scale = strength / (d as f64).sqrt();
                for v in a.values_mut() {
                    *v += scale * normal.sample(&mut rng);
                }
                let dir = random_direction(&mut rng, d);
                (a, dir.into_iter().map(|v| v * offset).collect(), *noise)
            }
            ShiftModel::Explicit {
                transform,
                offset,
                noise,
            } => {
                if offset.len() != d {
                    return Err(Error::Config("shift offset length != feature_dim".into()));
                }
                (Matrix::from_rows(transform, d)?, offset.clone(), *noise)
            }
        };
        if transform.shape() != (d, d) {
            return Err(Error::Config("shift transform must be feature_dim square".into()));
        }
        if transform.determinant()?.abs() < 1e-9 {
            return Err(Error::Config("shift transform is not invertible".into()));
        }
        if !(shift_noise >= 0.0) {
            return Err(Error::Config("shift noise must be non-negative".into()));
        }
        Ok(World {
            means,
            stds,
            background_mean,
            background_std,
            transform,
            offset,
            shift_noise,
        })
    }
}

impl World {
    pub fn sample_category<R: Rng + ?Sized>(&self, category: usize, rng: &mut R, unit: &Normal<f64>) -> Vec<f64> {
        let s = self.stds[category];
        self.means
            .row(category)
            .iter()
            .map(|m| m + s * unit.sample(rng))
            .collect()
    }

    pub fn sample_background<R: Rng + ?Sized>(&self, rng: &mut R, unit: &Normal<f64>) -> Vec<f64> {
        self.background_mean
            .iter()
            .map(|m| m + self.background_std * unit.sample(rng))
            .collect()
    }

    /// Source features are returned unchanged. Target features are mapped
    /// through the shift; noise draws happen only when the noise scale is
    /// positive, so a noiseless identity shift consumes no randomness.
    pub fn map_domain<R: Rng + ?Sized>(&self, x: Vec<f64>, domain: Domain, rng: &mut R, unit: &Normal<f64>) -> Vec<f64> {
        if domain == Domain::Source {
            return x;
        }
        let d = x.len();
        (0..d)
            .map(|i| {
                let mut v = self.offset[i];
                for (j, xj) in x.iter().enumerate() {
                    v += self.transform[(i, j)] * xj;
                }
                if self.shift_noise > 0.0 {
                    v += self.shift_noise * unit.sample(rng);
                }
                v
            })
            .collect()
    }
}

fn random_direction<R: Rng + ?Sized>(rng: &mut R, d: usize) -> Vec<f64> {
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    loop {
        let v: Vec<f64> = (0..d).map(|_| normal.sample(rng)).collect();
        let n = norm(&v);
        if n > 1e-6 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}
