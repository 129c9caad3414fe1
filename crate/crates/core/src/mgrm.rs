//! Graph relation regularization.
//!
//! Proposal features of one domain form a fully connected graph whose edges
//! are cosine similarities. Aggregated features give per-batch class
//! prototypes, which are folded into a global prototype bank per domain.
//! Cosines between source and target bank rows form the global relation
//! matrix `Π`; cosines between prototypes of the *noisily labeled* raw source
//! features and the target bank form the local matrix `Z`. The loss is the
//! mean absolute difference between the two on entries valid in both.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::diffcore::{cosine, cosine_with_grad, Matrix};
use crate::synthworld::Domain;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct IntraDomainGraph {
    pub features: Matrix,
    /// `N×N` cosine similarities with unit diagonal.
    pub edges: Matrix,
}

pub fn build_graph(features: &Matrix) -> Result<IntraDomainGraph> {
    let n = features.rows();
    if n == 0 {
        return Err(Error::InvalidInput("graph needs at least one node".into()));
    }
    let mut edges = Matrix::identity(n);
    for i in 0..n {
        for j in i + 1..n {
            let c = cosine(features.row(i), features.row(j));
            edges[(i, j)] = c;
            edges[(j, i)] = c;
        }
    }
    Ok(IntraDomainGraph {
        features: features.clone(),
        edges,
    })
}

/// Square aggregation weight `W` (`D×D`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregationWeights {
    pub w: Matrix,
}

impl AggregationWeights {
    pub fn zeros(d: usize) -> Self {
        Self { w: Matrix::zeros(d, d) }
    }

    /// Gaussian entries with standard deviation `scale / √D`.
    pub fn random<R: Rng + ?Sized>(d: usize, scale: f64, rng: &mut R) -> Self {
        let normal = Normal::new(0.0, scale / (d as f64).sqrt()).expect("finite scale");
        let mut w = Matrix::zeros(d, d);
        for v in w.values_mut() {
            *v = normal.sample(rng);
        }
        Self { w }
    }
}

/// `out_i = relu( (1/N) Σ_{i'} (e_{ii'} · W p_i + p_i) )` over all nodes of
/// the graph, the node itself included.
pub fn aggregate(graph: &IntraDomainGraph, weights: &AggregationWeights) -> Result<Matrix> {
    let (n, d) = graph.features.shape();
    if weights.w.shape() != (d, d) {
        return Err(Error::shape("mgrm::aggregate weight", d, weights.w.rows()));
    }
    // W p_i for every row at once: P Wᵀ.
    let projected = graph.features.matmul_t(&weights.w)?;
    let mut out = Matrix::zeros(n, d);
    for i in 0..n {
        let mean_edge = graph.edges.row(i).iter().sum::<f64>() / n as f64;
        let p = graph.features.row(i);
        let wp = projected.row(i);
        for (k, o) in out.row_mut(i).iter_mut().enumerate() {
            *o = (mean_edge * wp[k] + p[k]).max(0.0);
        }
    }
    Ok(out)
}

/// Per-category means of a labeled feature batch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prototypes {
    /// `C×D`; rows of absent categories are zero.
    pub values: Matrix,
    pub present: Vec<bool>,
    pub counts: Vec<usize>,
}

pub fn batch_prototypes(features: &Matrix, labels: &[usize], categories: usize) -> Result<Prototypes> {
    if labels.len() != features.rows() {
        return Err(Error::shape("mgrm::batch_prototypes labels", features.rows(), labels.len()));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= categories) {
        return Err(Error::InvalidInput(format!("label {bad} out of range for {categories} categories")));
    }
    let d = features.cols();
    let mut values = Matrix::zeros(categories, d);
    let mut counts = vec![0usize; categories];
    for (r, &l) in labels.iter().enumerate() {
        counts[l] += 1;
        for (acc, v) in values.row_mut(l).iter_mut().zip(features.row(r)) {
            *acc += v;
        }
    }
    for (u, &n) in counts.iter().enumerate() {
        if n > 0 {
            values.row_mut(u).iter_mut().for_each(|v| *v /= n as f64);
        }
    }
    Ok(Prototypes {
        values,
        present: counts.iter().map(|&n| n > 0).collect(),
        counts,
    })
}

/// How incoming batch prototypes are folded into the global bank. In all
/// variants the retention weight is `τ_{m,u} = clamp(cos(β_m, B_u), 0, 1)`
/// and a slot that has never been written adopts its own-category `β_u`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BankUpdateRule {
    /// Each present category updates only its own slot:
    /// `B_u ← (1 − τ_{u,u}) β_u + τ_{u,u} B_u`.
    #[default]
    Matched,
    /// Every initialized slot becomes the average over present categories
    /// `m` of `(1 − τ_{m,u}) β_m + τ_{m,u} B_u`.
    MeanOverPresent,
    /// As [`BankUpdateRule::MeanOverPresent`] but summed instead of averaged.
    Literal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainBank {
    pub values: Matrix,
    pub present: Vec<bool>,
    pub updates: Vec<u64>,
}

impl DomainBank {
    fn new(categories: usize, d: usize) -> Self {
        Self {
            values: Matrix::zeros(categories, d),
            present: vec![false; categories],
            updates: vec![0; categories],
        }
    }

    pub fn is_empty(&self) -> bool {
        !self.present.iter().any(|&p| p)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrototypeBank {
    pub source: DomainBank,
    pub target: DomainBank,
}

impl PrototypeBank {
    pub fn new(categories: usize, d: usize) -> Self {
        Self {
            source: DomainBank::new(categories, d),
            target: DomainBank::new(categories, d),
        }
    }

    pub fn categories(&self) -> usize {
        self.source.present.len()
    }

    pub fn domain(&self, domain: Domain) -> &DomainBank {
        match domain {
            Domain::Source => &self.source,
            Domain::Target => &self.target,
        }
    }

    fn domain_mut(&mut self, domain: Domain) -> &mut DomainBank {
        match domain {
            Domain::Source => &mut self.source,
            Domain::Target => &mut self.target,
        }
    }

    pub fn update(&mut self, beta: &Prototypes, domain: Domain, rule: BankUpdateRule) -> Result<()> {
        let bank = self.domain_mut(domain);
        if beta.values.shape() != bank.values.shape() {
            return Err(Error::shape("mgrm::update bank", bank.values.rows(), beta.values.rows()));
        }
        let c = bank.present.len();
        let present: Vec<usize> = (0..c).filter(|&m| beta.present[m]).collect();
        if present.is_empty() {
            return Ok(());
        }
        let old = bank.values.clone();
        let retention = |m: usize, u: usize| cosine(beta.values.row(m), old.row(u)).clamp(0.0, 1.0);
        for u in 0..c {
            let row: Option<Vec<f64>> = if !bank.present[u] {
                beta.present[u].then(|| beta.values.row(u).to_vec())
            } else {
                match rule {
                    BankUpdateRule::Matched => beta.present[u].then(|| {
                        let t = retention(u, u);
                        blend(beta.values.row(u), old.row(u), t)
                    }),
                    BankUpdateRule::MeanOverPresent | BankUpdateRule::Literal => {
                        let mut acc = vec![0.0; old.cols()];
                        for &m in &present {
                            let term = blend(beta.values.row(m), old.row(u), retention(m, u));
                            acc.iter_mut().zip(term).for_each(|(a, t)| *a += t);
                        }
                        if rule == BankUpdateRule::MeanOverPresent {
                            acc.iter_mut().for_each(|a| *a /= present.len() as f64);
                        }
                        Some(acc)
                    }
                }
            };
            if let Some(row) = row {
                if row.iter().any(|v| !v.is_finite()) {
                    return Err(Error::State(format!("prototype slot {u} became non-finite")));
                }
                bank.values.row_mut(u).copy_from_slice(&row);
                bank.present[u] = true;
                bank.updates[u] += 1;
            }
        }
        Ok(())
    }
}

fn blend(beta: &[f64], old: &[f64], t: f64) -> Vec<f64> {
    beta.iter().zip(old).map(|(b, o)| (1.0 - t) * b + t * o).collect()
}

/// `C×C` matrix with a validity mask; entries are cosines.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelationMatrix {
    pub values: Matrix,
    pub valid: Vec<bool>,
}

impl RelationMatrix {
    pub fn size(&self) -> usize {
        self.values.rows()
    }

    pub fn get(&self, u: usize, v: usize) -> Option<f64> {
        self.valid[u * self.size() + v].then(|| self.values[(u, v)])
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }
}

fn relation(rows: &Matrix, row_present: &[bool], cols: &DomainBank) -> RelationMatrix {
    let c = row_present.len();
    let mut values = Matrix::zeros(c, c);
    let mut valid = vec![false; c * c];
    for u in (0..c).filter(|&u| row_present[u]) {
        for v in (0..c).filter(|&v| cols.present[v]) {
            values[(u, v)] = cosine(rows.row(u), cols.values.row(v));
            valid[u * c + v] = true;
        }
    }
    RelationMatrix { values, valid }
}

/// `π_{u,v} = cos(B^s_u, B^t_v)`.
pub fn global_relation(bank: &PrototypeBank) -> Result<RelationMatrix> {
    if bank.source.is_empty() || bank.target.is_empty() {
        return Err(Error::State(
            "global relation needs at least one prototype in each domain".into(),
        ));
    }
    Ok(relation(&bank.source.values, &bank.source.present, &bank.target))
}

/// `z_{u,v} = cos(β̃_u, B^t_v)` with `β̃` the per-label means of raw noisy
/// source features.
pub fn noisy_local_relation(features: &Matrix, noisy_labels: &[usize], bank: &PrototypeBank) -> Result<RelationMatrix> {
    let local = batch_prototypes(features, noisy_labels, bank.categories())?;
    Ok(relation(&local.values, &local.present, &bank.target))
}

/// Mean `|z − π|` over entries valid in both, or `None` if there are none.
pub fn relation_l1(z: &RelationMatrix, pi: &RelationMatrix) -> Result<Option<f64>> {
    if z.size() != pi.size() {
        return Err(Error::shape("mgrm::relation_l1", pi.size(), z.size()));
    }
    let mut sum = 0.0;
    let mut n = 0usize;
    for (k, (&zv, &pv)) in z.valid.iter().zip(&pi.valid).enumerate() {
        if zv && pv {
            sum += (z.values.values()[k] - pi.values.values()[k]).abs();
            n += 1;
        }
    }
    Ok((n > 0).then(|| sum / n as f64))
}

#[derive(Debug, Clone, PartialEq)]
pub struct MgrmLoss {
    pub loss: f64,
    /// Gradient with respect to each row of the noisy feature batch.
    pub grad: Matrix,
    pub z: RelationMatrix,
    /// Number of entries the loss averaged over; zero means the loss was
    /// defined as 0 because nothing overlapped.
    pub valid_entries: usize,
}

/// Relation-matrix loss and its gradient through the local prototypes.
/// `pi` is treated as a constant.
pub fn mgrm_loss(
    features: &Matrix,
    noisy_labels: &[usize],
    bank: &PrototypeBank,
    pi: &RelationMatrix,
) -> Result<MgrmLoss> {
    let c = bank.categories();
    let local = batch_prototypes(features, noisy_labels, c)?;
    let z = relation(&local.values, &local.present, &bank.target);
    let mut grad = Matrix::zeros(features.rows(), features.cols());
    let entries: Vec<(usize, usize)> = (0..c)
        .flat_map(|u| (0..c).map(move |v| (u, v)))
        .filter(|&(u, v)| z.valid[u * c + v] && pi.valid[u * c + v])
        .collect();
    if entries.is_empty() {
        return Ok(MgrmLoss {
            loss: 0.0,
            grad,
            z,
            valid_entries: 0,
        });
    }
    let r = entries.len() as f64;
    let mut loss = 0.0;
    let mut proto_grad = Matrix::zeros(c, features.cols());
    for &(u, v) in &entries {
        let (cz, g) = cosine_with_grad(local.values.row(u), bank.target.values.row(v));
        let diff = cz - pi.values[(u, v)];
        loss += diff.abs();
        let s = if diff > 0.0 {
            1.0
        } else if diff < 0.0 {
            -1.0
        } else {
            0.0
        };
        for (acc, gk) in proto_grad.row_mut(u).iter_mut().zip(g) {
            *acc += s * gk / r;
        }
    }
    for (row, &l) in noisy_labels.iter().enumerate() {
        let scale = 1.0 / local.counts[l] as f64;
        for (o, g) in grad.row_mut(row).iter_mut().zip(proto_grad.row(l)) {
            *o = g * scale;
        }
    }
    Ok(MgrmLoss {
        loss: loss / r,
        grad,
        z,
        valid_entries: entries.len(),
    })
}
