//! Label-noise injection for source scenes.
//!
//! Exactly `floor(rho * N)` of the `N` annotated source instances are chosen
//! uniformly without replacement. Each chosen label is replaced by a draw
//! from the other `C - 1` categories plus "background", all equally likely.
//! Background removes the annotation; anything else relabels the instance and
//! remembers the original category.

use std::io::Write;

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{Domain, Scene};
use crate::rng::{purpose, stream};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum NoiseOutcome {
    Relabeled(usize),
    Removed,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorruptionEntry {
    pub scene: usize,
    pub object: usize,
    pub original: usize,
    pub outcome: NoiseOutcome,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorruptionLog {
    pub entries: Vec<CorruptionEntry>,
}

impl CorruptionLog {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn removed(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.outcome == NoiseOutcome::Removed)
            .count()
    }

    /// CSV with columns `scene_id, object_id, original_category, new_category_or_REMOVED`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["scene_id", "object_id", "original_category", "new_category_or_REMOVED"])?;
        for e in &self.entries {
            let new = match e.outcome {
                NoiseOutcome::Relabeled(c) => c.to_string(),
                NoiseOutcome::Removed => "REMOVED".to_string(),
            };
            w.write_record([e.scene.to_string(), e.object.to_string(), e.original.to_string(), new])?;
        }
        w.flush().map_err(|e| Error::io("<csv>", e))?;
        Ok(())
    }
}

/// `floor(rho * n)`, tolerant of the representation error in `rho` so that
/// e.g. `0.29 * 100` counts 29 rather than 28.
pub fn noise_count(rho: f64, n: usize) -> usize {
    ((rho * n as f64 + 1e-9).floor() as usize).min(n)
}

/// Draws one substitute for `original`: uniform over the other categories,
/// plus background when `with_background` is set.
pub(crate) fn substitute<R: Rng + ?Sized>(
    rng: &mut R,
    original: usize,
    categories: usize,
    with_background: bool,
) -> Option<usize> {
    let outcomes = if with_background { categories } else { categories - 1 };
    let r = rng.random_range(0..outcomes);
    if r == categories - 1 {
        return None;
    }
    Some(if r >= original { r + 1 } else { r })
}

pub fn inject_label_noise(
    scenes: &[Scene],
    rho: f64,
    seed: u64,
    categories: usize,
    background_in_noise: bool,
) -> Result<(Vec<Scene>, CorruptionLog)> {
    if !(0.0..=1.0).contains(&rho) {
        return Err(Error::InvalidInput(format!("noise rate {rho} outside [0, 1]")));
    }
    if categories < 2 {
        return Err(Error::InvalidInput("label noise needs at least two categories".into()));
    }
    if let Some(i) = scenes.iter().position(|s| s.domain != Domain::Source) {
        return Err(Error::InvalidInput(format!(
            "scene {i} is not a source scene; only source annotations are corrupted"
        )));
    }
    let instances: Vec<(usize, usize)> = scenes
        .iter()
        .enumerate()
        .flat_map(|(si, s)| {
            s.objects
                .iter()
                .enumerate()
                .filter(|(_, o)| o.annotated)
                .map(move |(oi, _)| (si, oi))
        })
        .collect();
    let count = noise_count(rho, instances.len());
    let mut rng = stream(seed, purpose::LABEL_NOISE, 0);
    let mut chosen = index::sample(&mut rng, instances.len(), count).into_vec();
    chosen.sort_unstable();

    let mut out = scenes.to_vec();
    let mut log = CorruptionLog::default();
    for idx in chosen {
        let (si, oi) = instances[idx];
        let obj = &mut out[si].objects[oi];
        let original = obj.category;
        let outcome = match substitute(&mut rng, original, categories, background_in_noise) {
            None => {
                obj.annotated = false;
                NoiseOutcome::Removed
            }
            Some(c) => {
                obj.category = c;
                obj.corrupted_from = Some(original);
                NoiseOutcome::Relabeled(c)
            }
        };
        log.entries.push(CorruptionEntry {
            scene: si,
            object: oi,
            original,
            outcome,
        });
    }
    Ok((out, log))
}

/// Undoes [`inject_label_noise`] using its log.
pub fn restore_labels(scenes: &[Scene], log: &CorruptionLog) -> Result<Vec<Scene>> {
    let mut out = scenes.to_vec();
    for e in &log.entries {
        let obj = out
            .get_mut(e.scene)
            .and_then(|s| s.objects.get_mut(e.object))
            .ok_or_else(|| Error::InvalidInput(format!("log entry {e:?} points nowhere")))?;
        obj.category = e.original;
        obj.annotated = true;
        obj.corrupted_from = None;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthworld::{Dataset, ScenarioConfig};

    fn clean_source(scenes: usize) -> Vec<Scene> {
        let cfg = ScenarioConfig {
            scenes_per_domain: scenes,
            ..ScenarioConfig::default()
        };
        let ds = Dataset::generate(&cfg).unwrap();
        ds.source
    }

    #[test]
    fn zero_rate_changes_nothing() {
        let src = clean_source(10);
        let (out, log) = inject_label_noise(&src, 0.0, 1, 5, true).unwrap();
        assert_eq!(out, src);
        assert!(log.is_empty());
    }

    #[test]
    fn full_rate_corrupts_every_instance() {
        let src = clean_source(10);
        let (out, log) = inject_label_noise(&src, 1.0, 1, 5, true).unwrap();
        assert_eq!(log.len(), 40);
        for (s, o) in src.iter().zip(&out) {
            for (a, b) in s.objects.iter().zip(&o.objects) {
                assert!(!b.annotated || b.category != a.category);
            }
        }
    }

    #[test]
    fn noise_count_is_exact_for_decimal_rates() {
        assert_eq!(noise_count(0.29, 100), 29);
        assert_eq!(noise_count(0.57, 100), 57);
        assert_eq!(noise_count(0.2, 99), 19);
        assert_eq!(noise_count(1.0, 7), 7);
        assert_eq!(noise_count(0.0, 7), 0);
    }

    #[test]
    fn floor_count_for_twenty_instances() {
        let src = clean_source(5);
        let (_, log) = inject_label_noise(&src, 0.4, 3, 5, true).unwrap();
        assert_eq!(log.len(), 8);
    }

    #[test]
    fn rejects_bad_rate_and_target_scenes() {
        let src = clean_source(2);
        assert!(inject_label_noise(&src, -0.1, 1, 5, true).is_err());
        assert!(inject_label_noise(&src, 1.1, 1, 5, true).is_err());
        let mut tgt = src.clone();
        tgt[0].domain = Domain::Target;
        assert!(inject_label_noise(&tgt, 0.2, 1, 5, true).is_err());
    }

    #[test]
    fn without_background_nothing_is_removed() {
        let src = clean_source(20);
        let (_, log) = inject_label_noise(&src, 1.0, 9, 5, false).unwrap();
        assert_eq!(log.removed(), 0);
    }

    #[test]
    fn csv_has_expected_columns() {
        let src = clean_source(5);
        let (_, log) = inject_label_noise(&src, 1.0, 4, 5, true).unwrap();
        let mut buf = Vec::new();
        log.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(
            lines.next().unwrap(),
            "scene_id,object_id,original_category,new_category_or_REMOVED"
        );
        assert_eq!(lines.count(), 20);
    }
}
