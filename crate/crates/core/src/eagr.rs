//! Entropy-aware domain discrimination and first-order gradient
//! reconcilement.
//!
//! The discriminator sees each proposal's feature concatenated with its
//! predicted class distribution, so alignment is conditioned on how
//! confident the classifier is. The meta update runs a few plain SGD steps
//! and then moves the parameters only part of the way towards the endpoint,
//! which to first order rewards gradients of successive batches that agree.

use serde::{Deserialize, Serialize};

use crate::diffcore::{bce, dot, grad_reverse, softmax_rows, GradBundle, Matrix, Mlp};
use crate::{Error, Result};

/// `[feature_i ‖ probs_i]` for every row.
pub fn concat_feature_probs(features: &Matrix, probs: &Matrix) -> Result<Matrix> {
    if features.rows() != probs.rows() {
        return Err(Error::shape("eagr::concat rows", features.rows(), probs.rows()));
    }
    let (n, d, c) = (features.rows(), features.cols(), probs.cols());
    let mut values = Vec::with_capacity(n * (d + c));
    for r in 0..n {
        values.extend_from_slice(features.row(r));
        values.extend_from_slice(probs.row(r));
    }
    Matrix::from_vec(n, d + c, values)
}

/// Splits a gradient of the concatenation back into its feature and
/// probability parts.
pub fn split_concat_grad(grad: &Matrix, feature_dim: usize) -> Result<(Matrix, Matrix)> {
    if feature_dim > grad.cols() {
        return Err(Error::shape("eagr::split", grad.cols(), feature_dim));
    }
    let n = grad.rows();
    let c = grad.cols() - feature_dim;
    let mut f = Vec::with_capacity(n * feature_dim);
    let mut p = Vec::with_capacity(n * c);
    for r in 0..n {
        let row = grad.row(r);
        f.extend_from_slice(&row[..feature_dim]);
        p.extend_from_slice(&row[feature_dim..]);
    }
    Ok((Matrix::from_vec(n, feature_dim, f)?, Matrix::from_vec(n, c, p)?))
}

/// Pulls a gradient with respect to softmax outputs back to the logits.
pub fn softmax_backward(probs: &Matrix, grad_probs: &Matrix) -> Result<Matrix> {
    if probs.shape() != grad_probs.shape() {
        return Err(Error::shape(
            "eagr::softmax_backward",
            format!("{:?}", probs.shape()),
            format!("{:?}", grad_probs.shape()),
        ));
    }
    let mut out = grad_probs.clone();
    for r in 0..probs.rows() {
        let s = probs.row(r);
        let inner = dot(s, grad_probs.row(r));
        for (o, &sj) in out.row_mut(r).iter_mut().zip(s) {
            *o = sj * (*o - inner);
        }
    }
    Ok(out)
}

/// Result of one discriminator evaluation.
#[derive(Debug, Clone)]
pub struct DiscOutput {
    pub loss: f64,
    /// Direct (non-reversed) gradient for the discriminator parameters.
    pub disc_grad: GradBundle,
    /// Gradient reaching the discriminator input after reversal by `mu`.
    pub input_grad: Matrix,
}

/// Mean binary cross-entropy of a sigmoid-output discriminator against
/// domain labels (1 source, 0 target).
pub fn domain_disc_loss(inputs: &Matrix, domain_labels: &[f64], disc: &Mlp, mu: f64) -> Result<DiscOutput> {
    if domain_labels.len() != inputs.rows() {
        return Err(Error::shape("eagr::disc labels", inputs.rows(), domain_labels.len()));
    }
    if disc.output_width() != 1 {
        return Err(Error::shape("eagr::disc output width", 1, disc.output_width()));
    }
    let n = inputs.rows();
    if n == 0 {
        return Ok(DiscOutput {
            loss: 0.0,
            disc_grad: GradBundle::zeros(disc.param_count()),
            input_grad: Matrix::zeros(0, inputs.cols()),
        });
    }
    let trace = disc.trace(inputs)?;
    let out = trace.output();
    let mut upstream = Matrix::zeros(n, 1);
    let mut loss = 0.0;
    for (r, &z) in domain_labels.iter().enumerate() {
        let (l, g) = bce(out[(r, 0)], z);
        loss += l;
        upstream[(r, 0)] = g / n as f64;
    }
    let back = disc.backward_from_trace(&trace, &upstream)?;
    let mut disc_grad = back.params;
    disc_grad.loss = loss / n as f64;
    Ok(DiscOutput {
        loss: loss / n as f64,
        disc_grad,
        input_grad: grad_reverse(&back.input, mu),
    })
}

/// Entropy-aware discriminator loss with reversed gradients routed back to
/// the features and to the classifier logits.
#[derive(Debug, Clone)]
pub struct EagrDiscOutput {
    pub loss: f64,
    pub disc_grad: GradBundle,
    pub feature_grad: Matrix,
    pub logit_grad: Matrix,
}

pub fn eagr_disc_loss(
    features: &Matrix,
    logits: &Matrix,
    domain_labels: &[f64],
    disc: &Mlp,
    mu: f64,
) -> Result<EagrDiscOutput> {
    if disc.input_width() != features.cols() + logits.cols() {
        return Err(Error::shape(
            "eagr::disc input width",
            features.cols() + logits.cols(),
            disc.input_width(),
        ));
    }
    let probs = softmax_rows(logits);
    let joint = concat_feature_probs(features, &probs)?;
    let out = domain_disc_loss(&joint, domain_labels, disc, mu)?;
    let (feature_grad, prob_grad) = split_concat_grad(&out.input_grad, features.cols())?;
    let logit_grad = softmax_backward(&probs, &prob_grad)?;
    Ok(EagrDiscOutput {
        loss: out.loss,
        disc_grad: out.disc_grad,
        feature_grad,
        logit_grad,
    })
}

/// Which snapshot the interpolation starts from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetaBase {
    /// `θ ← θ_before + λ (θ_after − θ_before)`.
    #[default]
    Before,
    /// `θ ← θ_after + λ (θ_after − θ_before)`.
    After,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetaConfig {
    pub inner_steps: usize,
    /// Inner-loop step size; `None` follows the outer learning rate.
    pub inner_lr: Option<f64>,
    pub meta_weight: f64,
    pub meta_base: MetaBase,
}

impl Default for MetaConfig {
    fn default() -> Self {
        Self {
            inner_steps: 2,
            inner_lr: None,
            meta_weight: 0.5,
            meta_base: MetaBase::Before,
        }
    }
}

impl MetaConfig {
    pub fn validate(&self) -> Result<()> {
        if self.inner_steps == 0 {
            return Err(Error::Config("inner_steps must be at least 1".into()));
        }
        if let Some(lr) = self.inner_lr {
            if !(lr > 0.0 && lr.is_finite()) {
                return Err(Error::Config(format!("inner_lr {lr} must be positive")));
            }
        }
        if !(self.meta_weight >= 0.0 && self.meta_weight.is_finite()) {
            return Err(Error::Config("meta_weight must be non-negative".into()));
        }
        Ok(())
    }
}

/// Something the inner loop can optimize: a flat parameter vector plus a
/// gradient oracle. `gradient(step)` is called once per inner step with the
/// step index so implementations can draw a fresh batch each time; it may
/// also advance state that is not part of the flat vector.
pub trait MetaObjective {
    fn params(&self) -> Vec<f64>;
    fn set_params(&mut self, params: &[f64]) -> Result<()>;
    fn gradient(&mut self, step: usize) -> Result<GradBundle>;
}

#[derive(Debug, Clone)]
pub struct InnerLoop {
    pub before: Vec<f64>,
    pub after: Vec<f64>,
    pub grads: Vec<GradBundle>,
}

/// `k` sequential SGD steps of size `lr`, leaving the objective at `θ_after`.
pub fn inner_loop<O: MetaObjective + ?Sized>(objective: &mut O, steps: usize, lr: f64) -> Result<InnerLoop> {
    if steps == 0 {
        return Err(Error::InvalidInput("inner loop needs at least one step".into()));
    }
    let before = objective.params();
    let mut theta = before.clone();
    let mut grads = Vec::with_capacity(steps);
    for k in 0..steps {
        let g = objective.gradient(k)?;
        if g.len() != theta.len() {
            return Err(Error::shape("eagr::inner_loop gradient", theta.len(), g.len()));
        }
        for (t, gi) in theta.iter_mut().zip(&g.grad) {
            *t -= lr * gi;
        }
        objective.set_params(&theta)?;
        grads.push(g);
    }
    Ok(InnerLoop {
        before,
        after: theta,
        grads,
    })
}

pub fn meta_update(before: &[f64], after: &[f64], weight: f64, base: MetaBase) -> Result<Vec<f64>> {
    if before.len() != after.len() {
        return Err(Error::shape("eagr::meta_update", before.len(), after.len()));
    }
    Ok(before
        .iter()
        .zip(after)
        .map(|(&b, &a)| {
            let start = match base {
                MetaBase::Before => b,
                MetaBase::After => a,
            };
            start + weight * (a - b)
        })
        .collect())
}

/// Pairwise agreement of the gradients produced by clean source, corrupted
/// source and target samples at the same parameters. Entries involving a
/// role with no samples are `None`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct GradReport {
    pub dot_cln_cpt: Option<f64>,
    pub dot_cln_t: Option<f64>,
    pub dot_cpt_t: Option<f64>,
    pub norm_cln: Option<f64>,
    pub norm_cpt: Option<f64>,
    pub norm_t: Option<f64>,
}

impl GradReport {
    pub fn from_gradients(clean: Option<&[f64]>, corrupted: Option<&[f64]>, target: Option<&[f64]>) -> Result<Self> {
        let len = [clean, corrupted, target].iter().flatten().map(|g| g.len()).max();
        for g in [clean, corrupted, target].iter().flatten() {
            if Some(g.len()) != len {
                return Err(Error::shape("GradReport", len.unwrap_or(0), g.len()));
            }
        }
        let pair = |a: Option<&[f64]>, b: Option<&[f64]>| Some(dot(a?, b?));
        let nrm = |a: Option<&[f64]>| a.map(|a| dot(a, a).sqrt());
        Ok(Self {
            dot_cln_cpt: pair(clean, corrupted),
            dot_cln_t: pair(clean, target),
            dot_cpt_t: pair(corrupted, target),
            norm_cln: nrm(clean),
            norm_cpt: nrm(corrupted),
            norm_t: nrm(target),
        })
    }

    fn cos(dot: Option<f64>, a: Option<f64>, b: Option<f64>) -> Option<f64> {
        let (d, a, b) = (dot?, a?, b?);
        (a > 0.0 && b > 0.0).then(|| (d / (a * b)).clamp(-1.0, 1.0))
    }

    pub fn cos_cln_cpt(&self) -> Option<f64> {
        Self::cos(self.dot_cln_cpt, self.norm_cln, self.norm_cpt)
    }

    pub fn cos_cln_t(&self) -> Option<f64> {
        Self::cos(self.dot_cln_t, self.norm_cln, self.norm_t)
    }

    pub fn cos_cpt_t(&self) -> Option<f64> {
        Self::cos(self.dot_cpt_t, self.norm_cpt, self.norm_t)
    }

    /// `|a·b| ≤ ‖a‖‖b‖` (with a little rounding slack) for every defined pair.
    pub fn satisfies_cauchy_schwarz(&self) -> bool {
        let ok = |d: Option<f64>, a: Option<f64>, b: Option<f64>| match (d, a, b) {
            (Some(d), Some(a), Some(b)) => d.abs() <= a * b * (1.0 + 1e-12) + 1e-300,
            _ => true,
        };
        ok(self.dot_cln_cpt, self.norm_cln, self.norm_cpt)
            && ok(self.dot_cln_t, self.norm_cln, self.norm_t)
            && ok(self.dot_cpt_t, self.norm_cpt, self.norm_t)
    }
}
