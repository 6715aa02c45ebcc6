//! Classification losses over log-probabilities.
//!
//! Every loss returns a [`LossValue`] whose gradients are taken with respect
//! to its log-probability inputs; [`LogProbs::backward_to_logits`] carries
//! them through the softmax.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Row-normalized log class posteriors, `m×C`.
#[derive(Clone, Debug, PartialEq)]
pub struct LogProbs(Tensor);

const NORMALIZATION_TOL: f64 = 1e-9;

fn logsumexp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

impl LogProbs {
    /// Validates that every row is a distribution in log space.
    pub fn new(t: Tensor) -> Result<Self> {
        t.require_matrix("log-probabilities")?;
        for i in 0..t.rows() {
            let lse = logsumexp(t.row(i));
            if !(lse.abs() <= NORMALIZATION_TOL) {
                return Err(Error::Param(format!("row {i} is not normalized (logsumexp = {lse})")));
            }
        }
        Ok(LogProbs(t))
    }

    /// From probabilities; zero entries become `-inf`.
    pub fn from_probs(p: &Tensor) -> Result<Self> {
        LogProbs::new(p.map(f64::ln))
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn rows(&self) -> usize {
        self.0.rows()
    }

    pub fn classes(&self) -> usize {
        self.0.cols()
    }

    pub fn probs(&self) -> Tensor {
        self.0.map(f64::exp)
    }

    pub fn row(&self, i: usize) -> &[f64] {
        self.0.row(i)
    }

    /// Argmax per row, ties toward the smaller class index.
    pub fn argmax(&self) -> Vec<usize> {
        (0..self.rows()).map(|i| argmax(self.row(i))).collect()
    }

    /// Split into rows `[0, at)` and `[at, m)`.
    pub fn split_rows(&self, at: usize) -> Result<(LogProbs, LogProbs)> {
        let (a, b) = self.0.split_rows(at)?;
        Ok((LogProbs(a), LogProbs(b)))
    }

    /// Map `∂L/∂log p` to `∂L/∂logits`: `g − softmax · Σ_y g_y`, row-wise.
    pub fn backward_to_logits(&self, grad: &Tensor) -> Result<Tensor> {
        if grad.shape() != self.0.shape() {
            return Err(Error::shape(format!(
                "log-softmax backward: gradient {:?} for {:?}",
                grad.shape(),
                self.0.shape()
            )));
        }
        let mut out = grad.clone();
        for i in 0..self.rows() {
            let total: f64 = grad.row(i).iter().sum();
            for (o, lp) in out.row_mut(i).iter_mut().zip(self.0.row(i)) {
                *o -= lp.exp() * total;
            }
        }
        Ok(out)
    }
}

pub(crate) fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (k, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = k;
        }
    }
    best
}

/// A scalar loss and its gradient with respect to each log-probability input.
#[derive(Clone, Debug)]
pub struct LossValue {
    pub value: f64,
    pub grads: Vec<Tensor>,
}

/// Max-subtracted log-softmax of each row.
pub fn log_softmax(logits: &Tensor) -> Result<LogProbs> {
    logits.require_matrix("log_softmax")?;
    let mut out = logits.clone();
    for i in 0..out.rows() {
        let row = out.row_mut(i);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        for v in row.iter_mut() {
            *v = *v - max - lse;
        }
    }
    Ok(LogProbs(out))
}

/// Mean negative log-likelihood of the labels.
pub fn cross_entropy(lp: &LogProbs, labels: &[usize]) -> Result<LossValue> {
    let (m, c) = (lp.rows(), lp.classes());
    if labels.len() != m {
        return Err(Error::shape(format!("{} labels for {m} rows", labels.len())));
    }
    let mut grad = Tensor::zeros(&[m, c]);
    let mut total = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        if y >= c {
            return Err(Error::Label { label: y, classes: c });
        }
        total -= lp.row(i)[y];
        grad.set(i, y, -1.0 / m as f64);
    }
    Ok(LossValue {
        value: total / m as f64,
        grads: vec![grad],
    })
}

/// Mean Shannon entropy of the predictions; zero-probability classes contribute 0.
pub fn entropy_loss(lp: &LogProbs) -> LossValue {
    let (m, c) = (lp.rows(), lp.classes());
    let mut grad = Tensor::zeros(&[m, c]);
    let mut total = 0.0;
    for i in 0..m {
        for (k, &l) in lp.row(i).iter().enumerate() {
            let p = l.exp();
            if p == 0.0 {
                continue;
            }
            total -= p * l;
            grad.set(i, k, -p * (l + 1.0) / m as f64);
        }
    }
    LossValue {
        value: total / m as f64,
        grads: vec![grad],
    }
}

fn same_shape(a: &LogProbs, b: &LogProbs, what: &str) -> Result<()> {
    if a.0.shape() != b.0.shape() {
        return Err(Error::shape(format!("{what}: {:?} vs {:?}", a.0.shape(), b.0.shape())));
    }
    Ok(())
}

/// Mean squared L2 distance between the two views' probability vectors.
pub fn consistency_l2(lp1: &LogProbs, lp2: &LogProbs) -> Result<LossValue> {
    same_shape(lp1, lp2, "consistency_l2")?;
    let (m, c) = (lp1.rows(), lp1.classes());
    let mut g1 = Tensor::zeros(&[m, c]);
    let mut g2 = Tensor::zeros(&[m, c]);
    let mut total = 0.0;
    for i in 0..m {
        for k in 0..c {
            let p1 = lp1.row(i)[k].exp();
            let p2 = lp2.row(i)[k].exp();
            let diff = p1 - p2;
            total += diff * diff;
            g1.set(i, k, 2.0 * diff * p1 / m as f64);
            g2.set(i, k, -2.0 * diff * p2 / m as f64);
        }
    }
    Ok(LossValue {
        value: total / m as f64,
        grads: vec![g1, g2],
    })
}

/// Class on which the two views' log-posteriors jointly peak; ties go to the
/// smaller index.
pub fn mec_pseudo_label(row1: &[f64], row2: &[f64]) -> usize {
    let mut best = 0;
    let mut best_sum = row1[0] + row2[0];
    for k in 1..row1.len() {
        let s = row1[k] + row2[k];
        if s > best_sum {
            best = k;
            best_sum = s;
        }
    }
    best
}

/// Min-entropy consensus loss: per sample `−½·max_y (log p₁(y) + log p₂(y))`,
/// averaged over the batch. The gradient is routed through the pseudo-label
/// class only.
pub fn mec_loss(lp1: &LogProbs, lp2: &LogProbs) -> Result<LossValue> {
    same_shape(lp1, lp2, "mec_loss")?;
    let (m, c) = (lp1.rows(), lp1.classes());
    let mut g1 = Tensor::zeros(&[m, c]);
    let mut g2 = Tensor::zeros(&[m, c]);
    let mut total = 0.0;
    for i in 0..m {
        let (r1, r2) = (lp1.row(i), lp2.row(i));
        let z = mec_pseudo_label(r1, r2);
        total += -0.5 * (r1[z] + r2[z]);
        g1.set(i, z, -0.5 / m as f64);
        g2.set(i, z, -0.5 / m as f64);
    }
    Ok(LossValue {
        value: total / m as f64,
        grads: vec![g1, g2],
    })
}

/// Per-row pseudo-labels for a pair of views.
pub fn mec_pseudo_labels(lp1: &LogProbs, lp2: &LogProbs) -> Result<Vec<usize>> {
    same_shape(lp1, lp2, "mec_pseudo_labels")?;
    Ok((0..lp1.rows())
        .map(|i| mec_pseudo_label(lp1.row(i), lp2.row(i)))
        .collect())
}

/// `L = Lˢ + λ·Lᵗ`; gradients are the source gradients followed by the target
/// gradients scaled by `λ`.
pub fn total_loss(ls: &LossValue, lt: &LossValue, lambda: f64) -> Result<LossValue> {
    if !(lambda >= 0.0) {
        return Err(Error::Param(format!("lambda must be non-negative, got {lambda}")));
    }
    let mut grads = ls.grads.clone();
    grads.extend(lt.grads.iter().map(|g| g.scale(lambda)));
    Ok(LossValue {
        value: ls.value + lambda * lt.value,
        grads,
    })
}
