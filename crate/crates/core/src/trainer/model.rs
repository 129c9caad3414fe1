use crate::diffcore::{Activation, Matrix, Mlp};
use crate::mgrm::AggregationWeights;
use crate::rng::{purpose, stream};
use crate::Result;

/// Every learnable piece of the simulated detector.
///
/// The classifier has one output per category plus a final background
/// column, so proposals that are unannotated from the learner's point of
/// view can be trained as negatives.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelBundle {
    /// Feature extractor, `D → hidden → D`, rectified.
    pub features: Mlp,
    /// Proposal classifier, `D → C + 1`.
    pub detector: Mlp,
    /// Feature-level domain discriminator, `D → hidden → 1`.
    pub dis_daf: Mlp,
    /// Discriminator on `[feature ‖ class probabilities]`.
    pub dis_eagr: Mlp,
    /// Graph aggregation weight. It only shapes prototype estimates, which
    /// are never differentiated, so training leaves it at its initial value.
    pub aggregation: AggregationWeights,
}

impl ModelBundle {
    pub fn new(feature_dim: usize, categories: usize, hidden: usize, aggregation_init: f64, seed: u64) -> Result<Self> {
        let d = feature_dim;
        let c1 = categories + 1;
        let mut rng = stream(seed, purpose::MODEL_INIT, 0);
        let features = Mlp::new(&[d, hidden, d], &[Activation::Relu, Activation::Relu], false, &mut rng)?;
        let detector = Mlp::new(&[d, c1], &[Activation::Identity], false, &mut rng)?;
        let dis_daf = Mlp::new(&[d, hidden, 1], &[Activation::Relu, Activation::Sigmoid], false, &mut rng)?;
        let dis_eagr = Mlp::new(&[d + c1, hidden, 1], &[Activation::Relu, Activation::Sigmoid], false, &mut rng)?;
        let aggregation = AggregationWeights::random(d, aggregation_init, &mut rng);
        Ok(Self {
            features,
            detector,
            dis_daf,
            dis_eagr,
            aggregation,
        })
    }

    pub fn categories(&self) -> usize {
        self.detector.output_width() - 1
    }

    pub fn feature_dim(&self) -> usize {
        self.features.output_width()
    }

    /// Parameters touched by the meta update: extractor then classifier.
    pub fn meta_params(&self) -> Vec<f64> {
        let mut p = self.features.params();
        p.extend(self.detector.params());
        p
    }

    pub fn set_meta_params(&mut self, params: &[f64]) -> Result<()> {
        let n = self.features.param_count();
        if params.len() != n + self.detector.param_count() {
            return Err(crate::Error::shape(
                "ModelBundle::set_meta_params",
                n + self.detector.param_count(),
                params.len(),
            ));
        }
        self.features.set_params(&params[..n])?;
        self.detector.set_params(&params[n..])
    }

    pub fn is_finite(&self) -> bool {
        self.features.is_finite()
            && self.detector.is_finite()
            && self.dis_daf.is_finite()
            && self.dis_eagr.is_finite()
            && self.aggregation.w.is_finite()
    }

    /// Extracted features and classifier logits for raw proposal features.
    pub fn predict(&self, raw: &Matrix) -> Result<(Matrix, Matrix)> {
        let f = self.features.forward(raw)?;
        let logits = self.detector.forward(&f)?;
        Ok((f, logits))
    }
}

/// What a source proposal's annotation says relative to the truth. Only the
/// simulation knows this; it feeds diagnostics, never training.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Clean,
    Corrupted,
    Target,
}

/// One training step's worth of proposals.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    /// Raw source proposal features.
    pub source: Matrix,
    /// Classification target per source row (`C` is background); `None`
    /// keeps the row out of the detection loss.
    pub source_det: Vec<Option<usize>>,
    /// Annotated foreground category per source row; these rows are the
    /// noisily labeled samples.
    pub source_noisy: Vec<Option<usize>>,
    pub source_roles: Vec<Role>,
    pub target: Matrix,
    /// Mined proposals that only join the prototype graphs.
    pub source_extra: Matrix,
    pub target_extra: Matrix,
}

impl Batch {
    pub fn validate(&self, feature_dim: usize) -> Result<()> {
        let n = self.source.rows();
        if n == 0 || self.target.rows() == 0 {
            return Err(crate::Error::InvalidInput("batch needs proposals from both domains".into()));
        }
        for (name, len) in [
            ("source_det", self.source_det.len()),
            ("source_noisy", self.source_noisy.len()),
            ("source_roles", self.source_roles.len()),
        ] {
            if len != n {
                return Err(crate::Error::shape(name, n, len));
            }
        }
        for m in [&self.source, &self.target, &self.source_extra, &self.target_extra] {
            if m.cols() != feature_dim && m.rows() > 0 {
                return Err(crate::Error::shape("batch feature width", feature_dim, m.cols()));
            }
        }
        Ok(())
    }
}
