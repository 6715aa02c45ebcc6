use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::whitening::{DEFAULT_EPSILON, DEFAULT_MOMENTUM};

/// Which losses and streams a run uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    /// Cross-entropy on source batches only; the target set is never touched.
    SourceOnly,
    /// Per-domain statistics plus entropy minimization on one unperturbed target view.
    DwtEntropy,
    /// Per-domain statistics plus min-entropy consensus on two perturbed target views.
    DwtMec,
    /// `DwtMec` with an EMA teacher used for evaluation.
    DwtMecMt,
}

impl Variant {
    pub const ALL: [Variant; 4] = [
        Variant::SourceOnly,
        Variant::DwtEntropy,
        Variant::DwtMec,
        Variant::DwtMecMt,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::SourceOnly => "source-only",
            Variant::DwtEntropy => "dwt-entropy",
            Variant::DwtMec => "dwt-mec",
            Variant::DwtMecMt => "dwt-mec-mt",
        }
    }

    pub fn uses_target(self) -> bool {
        self != Variant::SourceOnly
    }

    /// Whether batches are augmented: only the consensus variants need views
    /// that differ.
    pub fn perturbs(self) -> bool {
        matches!(self, Variant::DwtMec | Variant::DwtMecMt)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown variant `{s}`")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Adam,
    Sgd,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub variant: Variant,
    pub lambda: f64,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    /// Epochs at which the learning rate is multiplied by `lr_decay`. When
    /// absent they sit at 50/120 and 90/120 of `epochs`.
    pub lr_milestones: Option<Vec<usize>>,
    pub lr_decay: f64,
    pub group_size: usize,
    pub epsilon: f64,
    pub momentum: f64,
    pub ema_decay: f64,
    pub optimizer: OptimizerKind,
    pub sgd_momentum: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            variant: Variant::DwtMec,
            lambda: 0.1,
            batch_size: 64,
            lr: 1e-3,
            weight_decay: 5e-4,
            epochs: 30,
            lr_milestones: None,
            lr_decay: 0.1,
            group_size: 4,
            epsilon: DEFAULT_EPSILON,
            momentum: DEFAULT_MOMENTUM,
            ema_decay: 0.99,
            optimizer: OptimizerKind::Adam,
            sgd_momentum: 0.9,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, why: String| Err(Error::Config(format!("`{key}`: {why}")));
        if !(self.lambda >= 0.0) {
            return bad("lambda", format!("must be ≥ 0, got {}", self.lambda));
        }
        if !(self.lr > 0.0) {
            return bad("lr", format!("must be > 0, got {}", self.lr));
        }
        if !(self.weight_decay >= 0.0) {
            return bad("weight_decay", format!("must be ≥ 0, got {}", self.weight_decay));
        }
        if !(0.0..1.0).contains(&self.ema_decay) {
            return bad("ema_decay", format!("must be in [0, 1), got {}", self.ema_decay));
        }
        if self.batch_size < 2 {
            return bad("batch_size", format!("must be ≥ 2, got {}", self.batch_size));
        }
        if self.group_size == 0 {
            return bad("group_size", "must be ≥ 1".into());
        }
        if !(self.epsilon >= 0.0) {
            return bad("epsilon", format!("must be ≥ 0, got {}", self.epsilon));
        }
        if !(0.0..=1.0).contains(&self.momentum) {
            return bad("momentum", format!("must be in [0, 1], got {}", self.momentum));
        }
        if !(self.lr_decay > 0.0) {
            return bad("lr_decay", format!("must be > 0, got {}", self.lr_decay));
        }
        if !(0.0..1.0).contains(&self.sgd_momentum) {
            return bad("sgd_momentum", format!("must be in [0, 1), got {}", self.sgd_momentum));
        }
        Ok(())
    }

    pub fn milestones(&self) -> Vec<usize> {
        match &self.lr_milestones {
            Some(m) => m.clone(),
            None => vec![self.epochs * 50 / 120, self.epochs * 90 / 120],
        }
    }

    /// Learning rate for the (0-based) training epoch.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let passed = self.milestones().iter().filter(|&&m| epoch >= m).count();
        self.lr * self.lr_decay.powi(passed as i32)
    }
}
