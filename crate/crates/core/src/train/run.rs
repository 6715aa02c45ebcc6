//! The epoch loop.

use crate::data::{BatchStream, LabeledSet, PerturbSpec};
use crate::error::{Error, Result};
use crate::eval::accuracy;
use crate::layer::{DomainTag, Mode};
use crate::losses::{cross_entropy, log_softmax, LogProbs};
use crate::model::Network;
use crate::tensor::Tensor;

use super::config::{TrainConfig, Variant};
use super::optim::OptimState;
use super::step::{forward_losses, train_step, StepMetrics};
use super::teacher::{ema_update, TeacherState};

/// Rows per eval-mode forward pass.
const EVAL_CHUNK: usize = 512;

/// Metrics after a training epoch. Epoch 0 is the model before any update.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub lr: f64,
    pub source_loss: f64,
    pub target_loss: f64,
    pub total_loss: f64,
    pub source_accuracy: f64,
    pub target_accuracy: f64,
}

pub struct TrainRecord {
    pub epochs: Vec<EpochMetrics>,
    pub student: Network,
    pub teacher: Option<TeacherState>,
}

impl TrainRecord {
    /// The network that evaluation uses: the teacher when there is one.
    pub fn eval_network(&self) -> &Network {
        self.teacher.as_ref().map_or(&self.student, |t| &t.net)
    }

    pub fn final_metrics(&self) -> &EpochMetrics {
        self.epochs
            .last()
            .expect("a record holds at least the initial evaluation")
    }
}

/// Statistics domain used to score the target set: the target's own for
/// adapted variants, the source's for source-only training, which never
/// sees target data.
pub fn target_eval_domain(variant: Variant) -> DomainTag {
    if variant.uses_target() {
        DomainTag::Target
    } else {
        DomainTag::Source
    }
}

/// Eval-mode log-probabilities for a whole set, in chunks.
pub fn predict(net: &Network, inputs: &Tensor, domain: DomainTag) -> Result<LogProbs> {
    let mut net = net.clone();
    let n = inputs.rows();
    let mut data = Vec::with_capacity(n * net.classes());
    let mut start = 0;
    while start < n {
        let rows: Vec<usize> = (start..(start + EVAL_CHUNK).min(n)).collect();
        let logits = net.forward(&inputs.select_rows(&rows), Mode::Eval, domain)?;
        data.extend_from_slice(log_softmax(&logits)?.tensor().data());
        start += EVAL_CHUNK;
    }
    LogProbs::new(Tensor::new(vec![n, net.classes()], data)?)
}

/// Mean cross-entropy and accuracy of `net` on `set` using `domain` statistics.
pub fn evaluate(net: &Network, set: &LabeledSet, domain: DomainTag) -> Result<(f64, f64)> {
    let lp = predict(net, &set.inputs, domain)?;
    Ok((cross_entropy(&lp, &set.labels)?.value, accuracy(&lp, &set.labels)?))
}

/// Everything a run needs besides the network.
#[derive(Clone, Debug)]
pub struct TrainLoop<'a> {
    pub cfg: &'a TrainConfig,
    pub source: &'a LabeledSet,
    pub target: &'a LabeledSet,
    /// Applied to consensus variants only; other variants train on raw data.
    pub perturb: PerturbSpec,
    pub seed: u64,
}

struct Averages {
    sums: [f64; 3],
    steps: usize,
}

impl Averages {
    fn new() -> Self {
        Averages {
            sums: [0.0; 3],
            steps: 0,
        }
    }

    fn add(&mut self, m: &StepMetrics) {
        self.sums[0] += m.source_loss;
        self.sums[1] += m.target_loss;
        self.sums[2] += m.total_loss;
        self.steps += 1;
    }

    fn mean(&self) -> [f64; 3] {
        let n = self.steps.max(1) as f64;
        self.sums.map(|s| s / n)
    }
}

impl<'a> TrainLoop<'a> {
    pub fn stream(&self) -> Result<BatchStream<'a>> {
        let stream = BatchStream::new(self.source, self.target, self.cfg.batch_size, self.seed)?;
        if self.cfg.variant.perturbs() {
            stream
                .with_source_perturb(self.perturb)?
                .with_target_perturb(self.perturb)
        } else {
            Ok(stream)
        }
    }

    fn row(&self, net: &Network, epoch: usize, lr: f64, losses: [f64; 3]) -> Result<EpochMetrics> {
        let (_, source_accuracy) = evaluate(net, self.source, DomainTag::Source)?;
        let (_, target_accuracy) = evaluate(net, self.target, target_eval_domain(self.cfg.variant))?;
        Ok(EpochMetrics {
            epoch,
            lr,
            source_loss: losses[0],
            target_loss: losses[1],
            total_loss: losses[2],
            source_accuracy,
            target_accuracy,
        })
    }

    /// Train `net` for `cfg.epochs` epochs, calling `on_epoch` with each row as
    /// soon as it exists. Before the first update the model is scored once; a
    /// scratch copy runs one train-mode forward on the first batch so its
    /// running statistics exist, and the losses of that forward are reported.
    pub fn run(&self, mut net: Network, mut on_epoch: impl FnMut(&EpochMetrics) -> Result<()>) -> Result<TrainRecord> {
        self.cfg.validate()?;
        let stream = self.stream()?;
        let mut optim = OptimState::new(self.cfg.optimizer, &net.params(), self.cfg.sgd_momentum);
        let mut teacher = (self.cfg.variant == Variant::DwtMecMt).then(|| TeacherState::new(&net));
        let mut rows = Vec::with_capacity(self.cfg.epochs + 1);

        let first = stream.epoch(0);
        let first = first
            .first()
            .ok_or_else(|| Error::Param("no complete batch in an epoch".into()))?;
        let mut scratch = net.clone();
        let m = forward_losses(&mut scratch, first, self.cfg)?;
        let row = self.row(
            &scratch,
            0,
            self.cfg.lr_at(0),
            [m.source_loss, m.target_loss, m.total_loss],
        )?;
        on_epoch(&row)?;
        rows.push(row);

        for epoch in 0..self.cfg.epochs {
            let lr = self.cfg.lr_at(epoch);
            let mut avg = Averages::new();
            for (step, triple) in stream.epoch(epoch).iter().enumerate() {
                let m = train_step(&mut net, triple, self.cfg, &mut optim, lr).map_err(|e| match e {
                    Error::NonFinite { detail, .. } => Error::NonFinite {
                        epoch: epoch + 1,
                        step,
                        detail: format!("{detail}; lr {lr:e}; variant {}", self.cfg.variant),
                    },
                    // NaN activations reach a whitening layer before any loss exists.
                    e @ Error::NotPositiveDefinite { value, .. } if !value.is_finite() => Error::NonFinite {
                        epoch: epoch + 1,
                        step,
                        detail: format!("non-finite activations ({e}); lr {lr:e}; variant {}", self.cfg.variant),
                    },
                    other => other,
                })?;
                avg.add(&m);
                if let Some(t) = teacher.as_mut() {
                    ema_update(t, &net, self.cfg.ema_decay)?;
                }
            }
            let eval_net = teacher.as_ref().map_or(&net, |t| &t.net);
            let row = self.row(eval_net, epoch + 1, lr, avg.mean())?;
            on_epoch(&row)?;
            rows.push(row);
        }
        Ok(TrainRecord {
            epochs: rows,
            student: net,
            teacher,
        })
    }
}
