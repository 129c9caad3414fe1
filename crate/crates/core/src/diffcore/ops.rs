//! Loss functions and small differentiable operations.

use std::sync::atomic::{AtomicU64, Ordering};

use super::matrix::{dot, norm, Matrix};
use crate::{Error, Result};

/// Probabilities are clamped to `[PROB_EPS, 1 - PROB_EPS]` before any log.
pub const PROB_EPS: f64 = 1e-7;

static ZERO_NORM_COSINES: AtomicU64 = AtomicU64::new(0);

/// Number of cosine evaluations that hit a zero-norm vector since start-up.
pub fn zero_norm_cosine_count() -> u64 {
    ZERO_NORM_COSINES.load(Ordering::Relaxed)
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

pub fn softmax_rows(logits: &Matrix) -> Matrix {
    let mut out = logits.clone();
    for r in 0..logits.rows() {
        let s = softmax(logits.row(r));
        out.row_mut(r).copy_from_slice(&s);
    }
    out
}

/// Mean softmax cross-entropy and its gradient `(softmax − onehot) / N`.
pub fn softmax_xent(logits: &Matrix, labels: &[usize]) -> Result<(f64, Matrix)> {
    if labels.len() != logits.rows() {
        return Err(Error::shape("softmax_xent", logits.rows(), labels.len()));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= logits.cols()) {
        return Err(Error::InvalidInput(format!(
            "label {bad} out of range for {} classes",
            logits.cols()
        )));
    }
    let n = logits.rows();
    let mut grad = Matrix::zeros(n, logits.cols());
    if n == 0 {
        return Ok((0.0, grad));
    }
    let mut loss = 0.0;
    for (r, &label) in labels.iter().enumerate() {
        let row = logits.row(r);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|&l| (l - max).exp()).sum::<f64>().ln();
        loss += lse - row[label];
        let g = grad.row_mut(r);
        for (gj, &l) in g.iter_mut().zip(row) {
            *gj = (l - lse).exp() / n as f64;
        }
        g[label] -= 1.0 / n as f64;
    }
    Ok((loss / n as f64, grad))
}

/// Binary cross-entropy `−[z ln p + (1−z) ln(1−p)]` and `d loss / d p`.
///
/// `p` is clamped first; inside the clamped region the gradient is zero.
pub fn bce(prob: f64, domain_label: f64) -> (f64, f64) {
    let p = prob.clamp(PROB_EPS, 1.0 - PROB_EPS);
    let z = domain_label;
    let loss = -(z * p.ln() + (1.0 - z) * (1.0 - p).ln());
    let grad = if prob <= PROB_EPS || prob >= 1.0 - PROB_EPS {
        0.0
    } else {
        -z / p + (1.0 - z) / (1.0 - p)
    };
    (loss, grad)
}

/// Shannon entropy in nats.
pub fn entropy(probs: &[f64]) -> Result<f64> {
    if probs.iter().any(|&p| !(p >= 0.0)) {
        return Err(Error::InvalidInput("probabilities must be non-negative".into()));
    }
    let sum: f64 = probs.iter().sum();
    if (sum - 1.0).abs() > 1e-6 {
        return Err(Error::InvalidInput(format!(
            "probabilities sum to {sum}, not 1"
        )));
    }
    Ok(-probs
        .iter()
        .filter(|&&p| p > 0.0)
        .map(|&p| p * p.ln())
        .sum::<f64>())
}

/// Cosine similarity. A zero-norm operand yields 0 and bumps
/// [`zero_norm_cosine_count`].
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        ZERO_NORM_COSINES.fetch_add(1, Ordering::Relaxed);
        return 0.0;
    }
    (dot(a, b) / (na * nb)).clamp(-1.0, 1.0)
}

/// Cosine similarity together with its gradient with respect to `a`.
///
/// `∂cos/∂a = b/(‖a‖‖b‖) − cos · a/‖a‖²`; zero when either norm is zero.
pub fn cosine_with_grad(a: &[f64], b: &[f64]) -> (f64, Vec<f64>) {
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        ZERO_NORM_COSINES.fetch_add(1, Ordering::Relaxed);
        return (0.0, vec![0.0; a.len()]);
    }
    let c = dot(a, b) / (na * nb);
    let g = a
        .iter()
        .zip(b)
        .map(|(&ai, &bi)| bi / (na * nb) - c * ai / (na * na))
        .collect();
    (c, g)
}

/// Backward pass of a gradient-reversal layer: `−mu · upstream`.
pub fn grad_reverse(upstream: &Matrix, mu: f64) -> Matrix {
    upstream.scale(-mu)
}
