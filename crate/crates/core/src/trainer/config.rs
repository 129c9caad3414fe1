use serde::{Deserialize, Serialize};

use crate::eagr::MetaConfig;
use crate::evalkit::ApMode;
use crate::mgrm::BankUpdateRule;
use crate::pim::PimConfig;
use crate::synthworld::ScenarioConfig;
use crate::{Error, Result};

/// Which optional modules take part in training. All off is the
/// adversarially aligned baseline.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModuleFlags {
    pub pim: bool,
    pub mgrm: bool,
    pub eagr: bool,
}

impl ModuleFlags {
    pub const BASELINE: Self = Self {
        pim: false,
        mgrm: false,
        eagr: false,
    };
    pub const FULL: Self = Self {
        pim: true,
        mgrm: true,
        eagr: true,
    };

    pub fn label(&self) -> String {
        let mut parts = Vec::new();
        if self.pim {
            parts.push("pim");
        }
        if self.mgrm {
            parts.push("mgrm");
        }
        if self.eagr {
            parts.push("eagr");
        }
        if parts.is_empty() {
            "baseline".into()
        } else {
            parts.join("+")
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub scenario: ScenarioConfig,
    pub epochs: usize,
    pub steps_per_epoch: usize,
    pub lr: f64,
    /// Multiplier applied at each milestone.
    pub lr_decay: f64,
    /// Milestones as fractions of the total step count.
    pub lr_milestones: Vec<f64>,
    pub lambda_mgrm: f64,
    pub meta: MetaConfig,
    pub pim: PimConfig,
    /// Add mined source proposals to the detection loss as pseudo-labeled
    /// positives. Without it they are only withheld from the negatives.
    pub pim_in_det_loss: bool,
    /// Mined proposals per domain added as extra graph nodes each step.
    pub mined_per_step: usize,
    pub bank_update: BankUpdateRule,
    pub flags: ModuleFlags,
    pub batch_source: usize,
    pub batch_target: usize,
    pub hidden: usize,
    /// Gradient-reversal coefficient after warm-up.
    pub grl_mu: f64,
    /// Fraction of all steps over which the reversal coefficient ramps up
    /// linearly from 0.
    pub grl_warmup: f64,
    /// Minimum class probability for a prediction to feed a prototype.
    pub confidence_floor: f64,
    /// Scale of the aggregation weight initialization.
    pub aggregation_init: f64,
    /// Compute the clean/corrupted/target gradient agreement every step.
    pub grad_report: bool,
    pub nms_iou: f64,
    pub ap_mode: ApMode,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            scenario: ScenarioConfig::default(),
            epochs: 7,
            steps_per_epoch: 86,
            lr: 0.1,
            lr_decay: 0.1,
            lr_milestones: vec![5.0 / 7.0, 6.0 / 7.0],
            lambda_mgrm: 0.1,
            meta: MetaConfig::default(),
            pim: PimConfig::default(),
            pim_in_det_loss: false,
            mined_per_step: 8,
            bank_update: BankUpdateRule::Matched,
            flags: ModuleFlags::FULL,
            batch_source: 32,
            batch_target: 32,
            hidden: 32,
            grl_mu: 1.0,
            grl_warmup: 0.1,
            confidence_floor: 0.5,
            aggregation_init: 0.1,
            grad_report: true,
            nms_iou: 0.5,
            ap_mode: ApMode::AllPoint,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.scenario.validate()?;
        self.meta.validate()?;
        self.pim.validate()?;
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr {} must be positive", self.lr)));
        }
        if !(self.lambda_mgrm >= 0.0) {
            return Err(Error::Config("lambda_mgrm must be non-negative".into()));
        }
        if self.lr_milestones.iter().any(|m| !(0.0..=1.0).contains(m)) {
            return Err(Error::Config("lr milestones are fractions in [0, 1]".into()));
        }
        if self.batch_source == 0 || self.batch_target == 0 || self.hidden == 0 {
            return Err(Error::Config("batch sizes and hidden width must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.confidence_floor) {
            return Err(Error::Config("confidence_floor must lie in [0, 1)".into()));
        }
        if !(self.nms_iou > 0.0 && self.nms_iou < 1.0) {
            return Err(Error::Config("nms_iou must lie in (0, 1)".into()));
        }
        if !(0.0..=1.0).contains(&self.grl_warmup) || !(self.grl_mu >= 0.0) {
            return Err(Error::Config("invalid gradient-reversal schedule".into()));
        }
        Ok(())
    }

    pub fn total_steps(&self) -> usize {
        self.epochs * self.steps_per_epoch
    }

    /// Steps at which the learning rate is multiplied by `lr_decay`.
    pub fn decay_steps(&self) -> Vec<usize> {
        let total = self.total_steps() as f64;
        self.lr_milestones.iter().map(|m| (m * total).round() as usize).collect()
    }

    pub fn lr_at(&self, step: usize) -> f64 {
        let decays = self.decay_steps().iter().filter(|&&s| step >= s).count();
        self.lr * self.lr_decay.powi(decays as i32)
    }

    pub fn grl_at(&self, step: usize) -> f64 {
        let warm = self.grl_warmup * self.total_steps() as f64;
        if warm <= 0.0 {
            return self.grl_mu;
        }
        self.grl_mu * ((step + 1) as f64 / warm).min(1.0)
    }

    pub fn inner_lr(&self, step: usize) -> f64 {
        self.meta.inner_lr.unwrap_or_else(|| self.lr_at(step))
    }
}
