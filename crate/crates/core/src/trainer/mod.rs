//! Adversarial training of the simulated detector with optional mining,
//! graph relation and gradient reconcilement modules.

mod ablation;
mod config;
mod model;
mod objective;
mod record;

use std::collections::HashMap;

use rand::seq::index;
use rand::Rng;

pub use ablation::{ablation_grid, standard_rows, write_ablation_csv, AblationRow, AblationSummary};
pub use config::{ModuleFlags, TrainConfig};
pub use model::{Batch, ModelBundle, Role};
pub use objective::{
    confident_labels, objective, role_gradient, total_loss, update_bank, Gradients, LossBreakdown, ObjectiveInfo,
    ObjectiveSettings, RowMask,
};
pub use record::{write_relation_csv, EpochMetrics, RelationSnapshot, RunRecord, StepRow, STEP_COLUMNS};

use crate::diffcore::{sgd_step, softmax, GradBundle, Matrix};
use crate::eagr::{inner_loop, meta_update, GradReport, MetaObjective};
use crate::evalkit::{self, Detection, GroundTruth};
use crate::mgrm::{global_relation, noisy_local_relation, PrototypeBank};
use crate::pim::mine;
use crate::rng::{purpose, stream, StreamRng};
use crate::synthworld::{Dataset, Scene};
use crate::{Error, Result};

/// Losses above this (or non-finite) abort training.
pub const DIVERGENCE_LIMIT: f64 = 1e6;

/// `(scene, proposal)` index pair.
type ProposalRef = (usize, usize);

#[derive(Debug, Clone, Default)]
struct Mined {
    /// Source proposal → pseudo-label.
    source: HashMap<ProposalRef, usize>,
    source_list: Vec<ProposalRef>,
    target_list: Vec<ProposalRef>,
    source_precision: Option<f64>,
}

/// Trained parameters, the final prototype bank and the run record.
#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub bundle: ModelBundle,
    pub bank: PrototypeBank,
    pub record: RunRecord,
}

/// Stateful training run. Use [`train`] for the one-shot form; keep a
/// `Trainer` when the partial record is needed after a failure.
pub struct Trainer<'a> {
    cfg: TrainConfig,
    data: &'a Dataset,
    bundle: ModelBundle,
    bank: PrototypeBank,
    record: RunRecord,
    source_pool: Vec<ProposalRef>,
    target_pool: Vec<ProposalRef>,
    rng_source: StreamRng,
    rng_target: StreamRng,
    rng_extra: StreamRng,
    mined: Mined,
}

impl<'a> Trainer<'a> {
    pub fn new(cfg: &TrainConfig, data: &'a Dataset) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.scenario.feature_dim;
        let c = cfg.scenario.categories;
        let pool = |scenes: &[Scene]| -> Vec<ProposalRef> {
            scenes
                .iter()
                .enumerate()
                .flat_map(|(s, sc)| (0..sc.proposals.len()).map(move |p| (s, p)))
                .collect()
        };
        let source_pool = pool(&data.source);
        let target_pool = pool(&data.target);
        if source_pool.is_empty() || target_pool.is_empty() {
            return Err(Error::InvalidInput("both domains need at least one proposal".into()));
        }
        if let Some(p) = data.source.iter().chain(&data.target).flat_map(|s| &s.proposals).find(|p| p.feature.len() != d) {
            return Err(Error::shape("scene feature width", d, p.feature.len()));
        }
        Ok(Self {
            bundle: ModelBundle::new(d, c, cfg.hidden, cfg.aggregation_init, cfg.seed)?,
            bank: PrototypeBank::new(c, d),
            record: RunRecord::default(),
            source_pool,
            target_pool,
            rng_source: stream(cfg.seed, purpose::BATCH_SOURCE, 0),
            rng_target: stream(cfg.seed, purpose::BATCH_TARGET, 0),
            rng_extra: stream(cfg.seed, purpose::BATCH_EXTRA, 0),
            mined: Mined::default(),
            cfg: cfg.clone(),
            data,
        })
    }

    pub fn record(&self) -> &RunRecord {
        &self.record
    }

    pub fn bundle(&self) -> &ModelBundle {
        &self.bundle
    }

    pub fn into_output(self) -> TrainOutput {
        TrainOutput {
            bundle: self.bundle,
            bank: self.bank,
            record: self.record,
        }
    }

    fn settings(&self, step: usize) -> ObjectiveSettings {
        ObjectiveSettings {
            flags: self.cfg.flags,
            lambda_mgrm: self.cfg.lambda_mgrm,
            mu: self.cfg.grl_at(step),
            confidence_floor: self.cfg.confidence_floor,
            bank_update: self.cfg.bank_update,
        }
    }

    pub fn run(&mut self) -> Result<()> {
        for epoch in 0..self.cfg.epochs {
            if self.cfg.flags.pim {
                self.mine_all()?;
            }
            let mut mgrm_empty_steps = 0;
            for s in 0..self.cfg.steps_per_epoch {
                let step = epoch * self.cfg.steps_per_epoch + s;
                let (row, empty) = self.train_step(step, epoch)?;
                mgrm_empty_steps += usize::from(empty);
                self.record.steps.push(row);
            }
            let mut metrics = self.evaluate()?;
            metrics.epoch = epoch;
            metrics.mgrm_empty_steps = mgrm_empty_steps;
            self.record.epochs.push(metrics);
            let snapshot = self.relation_snapshot(epoch)?;
            self.record.relations.push(snapshot);
        }
        Ok(())
    }

    fn train_step(&mut self, step: usize, epoch: usize) -> Result<(StepRow, bool)> {
        let lr = self.cfg.lr_at(step);
        let settings = self.settings(step);
        let first = self.draw_batch();

        let grads = if self.cfg.grad_report {
            Some(self.grad_report(&first, &settings)?)
        } else {
            None
        };

        let (losses, empty) = if self.cfg.flags.eagr {
            let inner_steps = self.cfg.meta.inner_steps;
            let inner_lr = self.cfg.inner_lr(step);
            let mut meta = MetaStep {
                trainer: self,
                settings,
                lr,
                first: Some(first),
                first_losses: None,
            };
            let inner = inner_loop(&mut meta, inner_steps, inner_lr)?;
            let (losses, empty) = meta.first_losses.expect("inner loop ran at least once");
            let m = &self.cfg.meta;
            let theta = meta_update(&inner.before, &inner.after, m.meta_weight, m.meta_base)?;
            self.bundle.set_meta_params(&theta)?;
            (losses, empty)
        } else {
            let (losses, g, info) = total_loss(&self.bundle, &first, &mut self.bank, &settings)?;
            check_finite(step, &losses)?;
            sgd_step(&mut self.bundle.features, &g.features, lr)?;
            sgd_step(&mut self.bundle.detector, &g.detector, lr)?;
            self.step_discriminators(&g, lr)?;
            (losses, settings.flags.mgrm && info.mgrm_empty)
        };
        if !self.bundle.is_finite() {
            return Err(Error::Diverged {
                step,
                reason: "a parameter became non-finite".into(),
            });
        }
        Ok((
            StepRow {
                step,
                epoch,
                lr,
                grl: settings.mu,
                losses,
                mined_source: self.mined.source_list.len(),
                mined_target: self.mined.target_list.len(),
                grads,
            },
            empty,
        ))
    }

    fn step_discriminators(&mut self, g: &Gradients, lr: f64) -> Result<()> {
        sgd_step(&mut self.bundle.dis_daf, &g.dis_daf, lr)?;
        if self.cfg.flags.eagr {
            sgd_step(&mut self.bundle.dis_eagr, &g.dis_eagr, lr)?;
        }
        Ok(())
    }

    fn grad_report(&self, batch: &Batch, settings: &ObjectiveSettings) -> Result<GradReport> {
        let g = |role| role_gradient(&self.bundle, batch, &self.bank, settings, role);
        let (cln, cpt, tgt) = (g(Role::Clean)?, g(Role::Corrupted)?, g(Role::Target)?);
        GradReport::from_gradients(cln.as_deref(), cpt.as_deref(), tgt.as_deref())
    }

    fn draw_batch(&mut self) -> Batch {
        let c = self.cfg.scenario.categories;
        let d = self.cfg.scenario.feature_dim;
        let ns = self.cfg.batch_source.min(self.source_pool.len());
        let nt = self.cfg.batch_target.min(self.target_pool.len());
        let src: Vec<ProposalRef> = index::sample(&mut self.rng_source, self.source_pool.len(), ns)
            .into_iter()
            .map(|i| self.source_pool[i])
            .collect();
        let tgt: Vec<ProposalRef> = index::sample(&mut self.rng_target, self.target_pool.len(), nt)
            .into_iter()
            .map(|i| self.target_pool[i])
            .collect();

        let mut source_det = Vec::with_capacity(ns);
        let mut source_noisy = Vec::with_capacity(ns);
        let mut source_roles = Vec::with_capacity(ns);
        for &(s, p) in &src {
            let scene = &self.data.source[s];
            let label = scene.training_label(p);
            let det = match self.mined.source.get(&(s, p)) {
                Some(&pseudo) if self.cfg.flags.pim => self.cfg.pim_in_det_loss.then_some(pseudo),
                _ => Some(label.unwrap_or(c)),
            };
            source_det.push(det);
            source_noisy.push(label);
            let truth = scene.proposals[p].matched_gt.map(|o| scene.objects[o].true_category());
            source_roles.push(if label == truth { Role::Clean } else { Role::Corrupted });
        }
        let features = |scenes: &[Scene], refs: &[ProposalRef]| -> Matrix {
            let mut values = Vec::with_capacity(refs.len() * d);
            for &(s, p) in refs {
                values.extend_from_slice(&scenes[s].proposals[p].feature);
            }
            Matrix::from_vec(refs.len(), d, values).expect("validated scene features")
        };
        let extra = |rng: &mut StreamRng, list: &[ProposalRef], n: usize| -> Vec<ProposalRef> {
            if list.is_empty() || n == 0 {
                return Vec::new();
            }
            (0..n).map(|_| list[rng.random_range(0..list.len())]).collect()
        };
        let (src_extra, tgt_extra) = if self.cfg.flags.pim && self.cfg.flags.mgrm {
            let n = self.cfg.mined_per_step;
            let a = extra(&mut self.rng_extra, &self.mined.source_list, n);
            let b = extra(&mut self.rng_extra, &self.mined.target_list, n);
            (a, b)
        } else {
            (Vec::new(), Vec::new())
        };
        Batch {
            source: features(&self.data.source, &src),
            source_det,
            source_noisy,
            source_roles,
            target: features(&self.data.target, &tgt),
            source_extra: features(&self.data.source, &src_extra),
            target_extra: features(&self.data.target, &tgt_extra),
        }
    }

    fn scene_logits(&self, scene: &Scene) -> Result<Matrix> {
        let d = self.cfg.scenario.feature_dim;
        let values: Vec<f64> = scene.proposals.iter().flat_map(|p| p.feature.iter().copied()).collect();
        let x = Matrix::from_vec(scene.proposals.len(), d, values)?;
        Ok(self.bundle.predict(&x)?.1)
    }

    fn mine_all(&mut self) -> Result<()> {
        let c = self.cfg.scenario.categories;
        let mut mined = Mined::default();
        let mut missed = 0usize;
        for (domain_scenes, is_source) in [(&self.data.source, true), (&self.data.target, false)] {
            for (s, scene) in domain_scenes.iter().enumerate() {
                let logits = self.scene_logits(scene)?;
                let fg: Vec<usize> = (0..c).collect();
                let fg_logits = logits.transpose().select_rows(&fg).transpose();
                for m in mine(scene, &fg_logits, &self.cfg.pim)? {
                    if is_source {
                        let obj = scene.proposals[m.proposal].matched_gt.map(|o| &scene.objects[o]);
                        if obj.is_some_and(|o| !o.annotated) {
                            missed += 1;
                        }
                        mined.source.insert((s, m.proposal), m.pseudo_label);
                        mined.source_list.push((s, m.proposal));
                    } else {
                        mined.target_list.push((s, m.proposal));
                    }
                }
            }
        }
        mined.source_precision = (!mined.source_list.is_empty()).then(|| missed as f64 / mined.source_list.len() as f64);
        self.mined = mined;
        Ok(())
    }

    /// Target-domain detection metrics of the current model on all target
    /// scenes. Each proposal yields one detection per category, scored by
    /// class probability times objectness.
    pub fn evaluate(&self) -> Result<EpochMetrics> {
        let c = self.cfg.scenario.categories;
        let mut detections = Vec::new();
        let mut gts = Vec::new();
        let (mut correct, mut total) = (0usize, 0usize);
        for (i, scene) in self.data.target.iter().enumerate() {
            let logits = self.scene_logits(scene)?;
            for (r, p) in scene.proposals.iter().enumerate() {
                let probs = softmax(logits.row(r));
                for (k, &pk) in probs[..c].iter().enumerate() {
                    detections.push(Detection {
                        image: i,
                        bbox: p.bbox,
                        category: k,
                        score: pk * p.objectness,
                    });
                }
                if let Some(o) = p.matched_gt {
                    total += 1;
                    if crate::pim::argmax(&probs[..c]) == scene.objects[o].true_category() {
                        correct += 1;
                    }
                }
            }
            gts.extend(scene.objects.iter().map(|o| GroundTruth {
                image: i,
                bbox: o.bbox,
                category: o.true_category(),
            }));
        }
        let report = evalkit::evaluate(&detections, &gts, c, self.cfg.nms_iou, self.cfg.ap_mode)?;
        Ok(EpochMetrics {
            epoch: 0,
            map: report.map,
            per_category_ap: report.per_category_ap,
            target_accuracy: if total == 0 { 0.0 } else { correct as f64 / total as f64 },
            taxonomy: report.taxonomy,
            taxonomy_mean: report.taxonomy_mean_fractions,
            mined_source: self.mined.source_list.len(),
            mined_target: self.mined.target_list.len(),
            mined_source_precision: self.mined.source_precision,
            mgrm_empty_steps: 0,
        })
    }

    /// Global relation of the bank and the noisy local relation of every
    /// annotated source proposal under the current extractor.
    fn relation_snapshot(&self, epoch: usize) -> Result<RelationSnapshot> {
        let pi = global_relation(&self.bank).ok();
        let d = self.cfg.scenario.feature_dim;
        let mut values = Vec::new();
        let mut labels = Vec::new();
        for scene in &self.data.source {
            for (p, prop) in scene.proposals.iter().enumerate() {
                if let Some(l) = scene.training_label(p) {
                    values.extend_from_slice(&prop.feature);
                    labels.push(l);
                }
            }
        }
        let z = if self.bank.target.is_empty() || labels.is_empty() {
            None
        } else {
            let raw = Matrix::from_vec(labels.len(), d, values)?;
            let f = self.bundle.features.forward(&raw)?;
            Some(noisy_local_relation(&f, &labels, &self.bank)?)
        };
        Ok(RelationSnapshot { epoch, pi, z })
    }
}

fn check_finite(step: usize, losses: &LossBreakdown) -> Result<()> {
    if !losses.total.is_finite() || losses.total > DIVERGENCE_LIMIT {
        return Err(Error::Diverged {
            step,
            reason: format!("loss {:?}", losses),
        });
    }
    Ok(())
}

/// Inner loop over fresh batches. The first inner step reuses the batch the
/// outer step already drew; discriminators and the bank are updated at every
/// inner step and are not part of the interpolated parameters.
struct MetaStep<'t, 'a> {
    trainer: &'t mut Trainer<'a>,
    settings: ObjectiveSettings,
    lr: f64,
    first: Option<Batch>,
    first_losses: Option<(LossBreakdown, bool)>,
}

impl MetaObjective for MetaStep<'_, '_> {
    fn params(&self) -> Vec<f64> {
        self.trainer.bundle.meta_params()
    }

    fn set_params(&mut self, params: &[f64]) -> Result<()> {
        self.trainer.bundle.set_meta_params(params)
    }

    fn gradient(&mut self, step: usize) -> Result<GradBundle> {
        let batch = match self.first.take() {
            Some(b) => b,
            None => self.trainer.draw_batch(),
        };
        let t = &mut *self.trainer;
        let (losses, g, info) = total_loss(&t.bundle, &batch, &mut t.bank, &self.settings)?;
        check_finite(t.record.steps.len(), &losses)?;
        if step == 0 {
            self.first_losses = Some((losses, self.settings.flags.mgrm && info.mgrm_empty));
        }
        t.step_discriminators(&g, self.lr)?;
        Ok(g.meta())
    }
}

/// Generates the scenario in `cfg` and trains on it.
pub fn train(cfg: &TrainConfig) -> Result<TrainOutput> {
    let data = Dataset::generate(&cfg.scenario)?;
    train_on(cfg, &data)
}

pub fn train_on(cfg: &TrainConfig, data: &Dataset) -> Result<TrainOutput> {
    let mut t = Trainer::new(cfg, data)?;
    t.run()?;
    Ok(t.into_output())
}
