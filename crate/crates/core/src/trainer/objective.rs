//! The per-step training objective and its gradients.

use serde::{Deserialize, Serialize};

use super::config::ModuleFlags;
use super::model::{Batch, ModelBundle, Role};
use crate::diffcore::{softmax, softmax_xent, GradBundle, Matrix};
use crate::eagr::{domain_disc_loss, eagr_disc_loss};
use crate::mgrm::{aggregate, batch_prototypes, build_graph, global_relation, mgrm_loss, BankUpdateRule, PrototypeBank};
use crate::synthworld::Domain;
use crate::Result;

/// Knobs of one objective evaluation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObjectiveSettings {
    pub flags: ModuleFlags,
    pub lambda_mgrm: f64,
    /// Gradient-reversal coefficient for this step.
    pub mu: f64,
    pub confidence_floor: f64,
    pub bank_update: BankUpdateRule,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub det: f64,
    pub mgrm: f64,
    pub dis_daf: f64,
    pub dis_eagr: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn assemble(det: f64, mgrm: f64, dis_daf: f64, dis_eagr: f64, lambda_mgrm: f64) -> Self {
        Self {
            det,
            mgrm,
            dis_daf,
            dis_eagr,
            total: det + lambda_mgrm * mgrm + dis_daf + dis_eagr,
        }
    }
}

/// Parameter gradients of every network in a [`ModelBundle`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub features: GradBundle,
    pub detector: GradBundle,
    pub dis_daf: GradBundle,
    pub dis_eagr: GradBundle,
}

impl Gradients {
    /// Extractor and classifier gradients in [`ModelBundle::meta_params`] order.
    pub fn meta(&self) -> GradBundle {
        let mut grad = self.features.grad.clone();
        grad.extend_from_slice(&self.detector.grad);
        GradBundle { grad, loss: 0.0 }
    }
}

/// Extra outputs of an objective evaluation.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ObjectiveInfo {
    /// Number of relation entries the graph loss averaged over.
    pub mgrm_entries: usize,
    /// Set when the graph module is on but had nothing to compare.
    pub mgrm_empty: bool,
}

/// Confident foreground predictions: `(row, category)` for rows whose best
/// foreground probability reaches `floor`.
pub fn confident_labels(logits: &Matrix, categories: usize, floor: f64) -> Vec<(usize, usize)> {
    (0..logits.rows())
        .filter_map(|r| {
            let p = softmax(logits.row(r));
            let (best, prob) = p[..categories]
                .iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |acc, (i, &v)| if v > acc.1 { (i, v) } else { acc });
            (prob >= floor).then_some((r, best))
        })
        .collect()
}

fn fold_domain(
    bundle: &ModelBundle,
    nodes: &Matrix,
    bank: &mut PrototypeBank,
    domain: Domain,
    settings: &ObjectiveSettings,
) -> Result<()> {
    if nodes.rows() == 0 {
        return Ok(());
    }
    let (f, logits) = bundle.predict(nodes)?;
    let graph = build_graph(&f)?;
    let agg = aggregate(&graph, &bundle.aggregation)?;
    let confident = confident_labels(&logits, bundle.categories(), settings.confidence_floor);
    if confident.is_empty() {
        return Ok(());
    }
    let rows: Vec<usize> = confident.iter().map(|&(r, _)| r).collect();
    let labels: Vec<usize> = confident.iter().map(|&(_, c)| c).collect();
    let beta = batch_prototypes(&agg.select_rows(&rows), &labels, bundle.categories())?;
    bank.update(&beta, domain, settings.bank_update)
}

/// Folds the batch's confident predictions into the global prototype bank.
/// Source graph nodes are the annotated foreground proposals plus mined
/// extras; target nodes are all target proposals plus mined extras.
pub fn update_bank(bundle: &ModelBundle, batch: &Batch, bank: &mut PrototypeBank, settings: &ObjectiveSettings) -> Result<()> {
    let annotated: Vec<usize> = (0..batch.source.rows()).filter(|&r| batch.source_noisy[r].is_some()).collect();
    let source_nodes = batch.source.select_rows(&annotated).vstack(&batch.source_extra)?;
    fold_domain(bundle, &source_nodes, bank, Domain::Source, settings)?;
    let target_nodes = batch.target.vstack(&batch.target_extra)?;
    fold_domain(bundle, &target_nodes, bank, Domain::Target, settings)
}

/// Restricts an objective evaluation to a subset of rows. Used for
/// per-role gradients; the graph loss is skipped under a mask.
#[derive(Debug, Clone, PartialEq)]
pub struct RowMask {
    pub source: Vec<bool>,
    pub target: Vec<bool>,
}

/// Loss and gradients at the current parameters, given an already updated
/// prototype bank.
pub fn objective(
    bundle: &ModelBundle,
    batch: &Batch,
    bank: &PrototypeBank,
    settings: &ObjectiveSettings,
    mask: Option<&RowMask>,
) -> Result<(LossBreakdown, Gradients, ObjectiveInfo)> {
    batch.validate(bundle.features.input_width())?;
    let c = bundle.categories();
    let ns = batch.source.rows();
    let nt = batch.target.rows();
    let keep_s: Vec<usize> = (0..ns).filter(|&r| mask.is_none_or(|m| m.source[r])).collect();
    let keep_t: Vec<usize> = (0..nt).filter(|&r| mask.is_none_or(|m| m.target[r])).collect();

    let fs_trace = bundle.features.trace(&batch.source)?;
    let ft_trace = bundle.features.trace(&batch.target)?;
    let f_s = fs_trace.output().clone();
    let f_t = ft_trace.output().clone();
    let ds_trace = bundle.detector.trace(&f_s)?;
    let dt_trace = bundle.detector.trace(&f_t)?;
    let logits_s = ds_trace.output();
    let logits_t = dt_trace.output();

    let d = f_s.cols();
    let mut g_fs = Matrix::zeros(ns, d);
    let mut g_ft = Matrix::zeros(nt, d);
    let mut g_ls = Matrix::zeros(ns, c + 1);
    let mut g_lt = Matrix::zeros(nt, c + 1);
    let mut info = ObjectiveInfo::default();

    // Proposal classification on rows that carry a target class.
    let det_rows: Vec<usize> = keep_s.iter().copied().filter(|&r| batch.source_det[r].is_some()).collect();
    let mut det = 0.0;
    if !det_rows.is_empty() {
        let labels: Vec<usize> = det_rows.iter().map(|&r| batch.source_det[r].unwrap_or(c)).collect();
        let (loss, g) = softmax_xent(&logits_s.select_rows(&det_rows), &labels)?;
        det = loss;
        for (k, &r) in det_rows.iter().enumerate() {
            g_ls.row_mut(r).copy_from_slice(g.row(k));
        }
    }

    let domain_labels: Vec<f64> = std::iter::repeat_n(1.0, keep_s.len())
        .chain(std::iter::repeat_n(0.0, keep_t.len()))
        .collect();
    let scatter = |g: &Matrix, gs: &mut Matrix, gt: &mut Matrix| {
        for (k, &r) in keep_s.iter().enumerate() {
            gs.row_mut(r).iter_mut().zip(g.row(k)).for_each(|(a, b)| *a += b);
        }
        for (k, &r) in keep_t.iter().enumerate() {
            gt.row_mut(r).iter_mut().zip(g.row(keep_s.len() + k)).for_each(|(a, b)| *a += b);
        }
    };

    // Feature-level adversarial alignment.
    let joint_f = f_s.select_rows(&keep_s).vstack(&f_t.select_rows(&keep_t))?;
    let daf = domain_disc_loss(&joint_f, &domain_labels, &bundle.dis_daf, settings.mu)?;
    scatter(&daf.input_grad, &mut g_fs, &mut g_ft);

    let mut dis_eagr = 0.0;
    let mut eagr_grad = GradBundle::zeros(bundle.dis_eagr.param_count());
    if settings.flags.eagr {
        let joint_l = logits_s.select_rows(&keep_s).vstack(&logits_t.select_rows(&keep_t))?;
        let out = eagr_disc_loss(&joint_f, &joint_l, &domain_labels, &bundle.dis_eagr, settings.mu)?;
        dis_eagr = out.loss;
        eagr_grad = out.disc_grad;
        scatter(&out.feature_grad, &mut g_fs, &mut g_ft);
        scatter(&out.logit_grad, &mut g_ls, &mut g_lt);
    }

    let mut mgrm = 0.0;
    if settings.flags.mgrm && mask.is_none() {
        let rows: Vec<usize> = (0..ns).filter(|&r| batch.source_noisy[r].is_some()).collect();
        match global_relation(bank) {
            Ok(pi) if !rows.is_empty() => {
                let labels: Vec<usize> = rows.iter().map(|&r| batch.source_noisy[r].unwrap_or(0)).collect();
                let out = mgrm_loss(&f_s.select_rows(&rows), &labels, bank, &pi)?;
                mgrm = out.loss;
                info.mgrm_entries = out.valid_entries;
                info.mgrm_empty = out.valid_entries == 0;
                for (k, &r) in rows.iter().enumerate() {
                    g_fs.row_mut(r)
                        .iter_mut()
                        .zip(out.grad.row(k))
                        .for_each(|(a, b)| *a += settings.lambda_mgrm * b);
                }
            }
            _ => info.mgrm_empty = true,
        }
    }

    let back_ds = bundle.detector.backward_from_trace(&ds_trace, &g_ls)?;
    let back_dt = bundle.detector.backward_from_trace(&dt_trace, &g_lt)?;
    let g_fs = g_fs.add(&back_ds.input)?;
    let g_ft = g_ft.add(&back_dt.input)?;
    let mut features = bundle.features.backward_from_trace(&fs_trace, &g_fs)?.params;
    features.accumulate(&bundle.features.backward_from_trace(&ft_trace, &g_ft)?.params)?;
    let mut detector = back_ds.params;
    detector.accumulate(&back_dt.params)?;

    let losses = LossBreakdown::assemble(det, mgrm, daf.loss, dis_eagr, settings.lambda_mgrm);
    features.loss = losses.total;
    detector.loss = losses.total;
    Ok((
        losses,
        Gradients {
            features,
            detector,
            dis_daf: daf.disc_grad,
            dis_eagr: eagr_grad,
        },
        info,
    ))
}

/// Bank update followed by the objective: the full per-step loss.
pub fn total_loss(
    bundle: &ModelBundle,
    batch: &Batch,
    bank: &mut PrototypeBank,
    settings: &ObjectiveSettings,
) -> Result<(LossBreakdown, Gradients, ObjectiveInfo)> {
    if settings.flags.mgrm {
        update_bank(bundle, batch, bank, settings)?;
    }
    objective(bundle, batch, bank, settings, None)
}

/// Gradient of the extractor and classifier for the samples of one role:
/// classification loss on the role's source rows plus the discriminator
/// terms on the role's rows. `None` when the batch has no such rows.
pub fn role_gradient(
    bundle: &ModelBundle,
    batch: &Batch,
    bank: &PrototypeBank,
    settings: &ObjectiveSettings,
    role: Role,
) -> Result<Option<Vec<f64>>> {
    let source: Vec<bool> = batch.source_roles.iter().map(|&r| r == role).collect();
    let target = vec![role == Role::Target; batch.target.rows()];
    if !source.iter().chain(&target).any(|&b| b) {
        return Ok(None);
    }
    let mask = RowMask { source, target };
    let (_, grads, _) = objective(bundle, batch, bank, settings, Some(&mask))?;
    Ok(Some(grads.meta().grad))
}
