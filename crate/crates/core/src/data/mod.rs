//! Datasets and the batch pipeline that feeds training.
//!
//! Target labels live in [`LabeledSet`] so evaluation can score predictions,
//! but the training path only ever sees [`BatchTriple`], which has no target
//! label field.

pub mod batches;
pub mod idx;
pub mod perturb;
pub mod synthetic;

pub use batches::{BatchStream, BatchTriple};
pub use idx::{load_idx, parse_idx, write_idx, IdxArray};
pub use perturb::{apply_affine_to_set, perturb_sample, AffineParams, PerturbSpec};
pub use synthetic::{gen_synthetic_shift, SyntheticSpec};

use crate::error::{Error, Result};
use crate::layer::DomainTag;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledSet {
    /// `n × …`: one row per sample, either feature vectors or `1×h×w` images.
    pub inputs: Tensor,
    pub labels: Vec<usize>,
    pub classes: usize,
    pub domain: DomainTag,
}

impl LabeledSet {
    pub fn new(inputs: Tensor, labels: Vec<usize>, classes: usize, domain: DomainTag) -> Result<Self> {
        if inputs.rank() < 2 || inputs.rows() != labels.len() {
            return Err(Error::shape(format!(
                "{} labels for inputs of shape {:?}",
                labels.len(),
                inputs.shape()
            )));
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::Label { label, classes });
        }
        Ok(LabeledSet {
            inputs,
            labels,
            classes,
            domain,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Per-sample shape, without the batch axis.
    pub fn sample_shape(&self) -> &[usize] {
        &self.inputs.shape()[1..]
    }

    pub fn subset(&self, indices: &[usize]) -> LabeledSet {
        LabeledSet {
            inputs: self.inputs.select_rows(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            classes: self.classes,
            domain: self.domain,
        }
    }

    pub fn with_domain(mut self, domain: DomainTag) -> Self {
        self.domain = domain;
        self
    }
}

/// SplitMix64 finalizer, used to derive independent per-item seeds from
/// `(seed, epoch, stream, index)` so results do not depend on scheduling.
pub(crate) fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub(crate) fn derive_seed(parts: &[u64]) -> u64 {
    parts.iter().fold(0x5eed, |acc, &p| mix(acc ^ mix(p)))
}
