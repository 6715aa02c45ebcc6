//! Epoch-wise batching into (source, target view 1, target view 2) triples.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::perturb::{perturb_sample, PerturbSpec};
use super::{derive_seed, LabeledSet};
use crate::error::{Error, Result};
use crate::par;
use crate::tensor::Tensor;

const SOURCE_ORDER: u64 = 0;
const TARGET_ORDER: u64 = 1;
const SOURCE_VIEW: u64 = 2;
const TARGET_VIEW_1: u64 = 3;
const TARGET_VIEW_2: u64 = 4;

/// One training step's input. There is deliberately no target label field.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchTriple {
    pub source: Tensor,
    pub source_labels: Vec<usize>,
    pub target_v1: Tensor,
    pub target_v2: Tensor,
    /// Positions of the target rows in the target set, for bookkeeping.
    pub target_indices: Vec<usize>,
}

impl BatchTriple {
    pub fn len(&self) -> usize {
        self.source_labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.source_labels.is_empty()
    }
}

/// Deterministic batch producer. Every random draw is keyed by
/// `(seed, epoch, stream, index)`, so the output does not depend on thread
/// scheduling and any epoch can be produced on its own.
#[derive(Clone, Debug)]
pub struct BatchStream<'a> {
    source: &'a LabeledSet,
    target: &'a LabeledSet,
    m: usize,
    seed: u64,
    source_perturb: PerturbSpec,
    target_perturb: PerturbSpec,
}

impl<'a> BatchStream<'a> {
    pub fn new(source: &'a LabeledSet, target: &'a LabeledSet, m: usize, seed: u64) -> Result<Self> {
        if m < 2 {
            return Err(Error::Param(format!("batch size {m} below 2")));
        }
        if m > source.len() || m > target.len() {
            return Err(Error::Param(format!(
                "batch size {m} exceeds dataset size (source {}, target {})",
                source.len(),
                target.len()
            )));
        }
        if source.sample_shape() != target.sample_shape() {
            return Err(Error::shape(format!(
                "source samples {:?} and target samples {:?} differ",
                source.sample_shape(),
                target.sample_shape()
            )));
        }
        Ok(BatchStream {
            source,
            target,
            m,
            seed,
            source_perturb: PerturbSpec::none(),
            target_perturb: PerturbSpec::none(),
        })
    }

    pub fn with_source_perturb(mut self, spec: PerturbSpec) -> Result<Self> {
        spec.validate()?;
        self.source_perturb = spec;
        Ok(self)
    }

    pub fn with_target_perturb(mut self, spec: PerturbSpec) -> Result<Self> {
        spec.validate()?;
        self.target_perturb = spec;
        Ok(self)
    }

    /// Full batches per epoch; the ragged tail is dropped.
    pub fn batches_per_epoch(&self) -> usize {
        self.source.len().min(self.target.len()) / self.m
    }

    fn order(&self, n: usize, epoch: usize, stream: u64) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..n).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[self.seed, epoch as u64, stream]));
        idx.shuffle(&mut rng);
        idx
    }

    fn gather(&self, set: &LabeledSet, rows: &[usize], spec: &PerturbSpec, epoch: usize, stream: u64) -> Tensor {
        let shape = set.sample_shape();
        let len = set.inputs.row_len();
        let samples = par::map_indexed(rows.len(), |k| {
            let i = rows[k];
            let x = set.inputs.row(i);
            if spec.is_identity() {
                return x.to_vec();
            }
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[self.seed, epoch as u64, stream, i as u64]));
            perturb_sample(x, shape, spec, &mut rng)
        });
        let mut full_shape = vec![rows.len()];
        full_shape.extend_from_slice(shape);
        let mut data = Vec::with_capacity(rows.len() * len);
        for s in samples {
            data.extend(s);
        }
        Tensor::new(full_shape, data).expect("gathered rows match the sample shape")
    }

    pub fn epoch(&self, epoch: usize) -> Vec<BatchTriple> {
        let s_order = self.order(self.source.len(), epoch, SOURCE_ORDER);
        let t_order = self.order(self.target.len(), epoch, TARGET_ORDER);
        (0..self.batches_per_epoch())
            .map(|b| {
                let s_rows = &s_order[b * self.m..(b + 1) * self.m];
                let t_rows = &t_order[b * self.m..(b + 1) * self.m];
                BatchTriple {
                    source: self.gather(self.source, s_rows, &self.source_perturb, epoch, SOURCE_VIEW),
                    source_labels: s_rows.iter().map(|&i| self.source.labels[i]).collect(),
                    target_v1: self.gather(self.target, t_rows, &self.target_perturb, epoch, TARGET_VIEW_1),
                    target_v2: self.gather(self.target, t_rows, &self.target_perturb, epoch, TARGET_VIEW_2),
                    target_indices: t_rows.to_vec(),
                }
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layer::DomainTag;

    fn set(n: usize, d: usize, offset: f64, domain: DomainTag) -> LabeledSet {
        let x = Tensor::new(vec![n, d], (0..n * d).map(|i| offset + i as f64).collect()).unwrap();
        LabeledSet::new(x, (0..n).map(|i| i % 3).collect(), 3, domain).unwrap()
    }

    #[test]
    fn zero_perturbation_gives_identical_views() {
        let (s, t) = (
            set(20, 3, 0.0, DomainTag::Source),
            set(17, 3, 1000.0, DomainTag::Target),
        );
        let stream = BatchStream::new(&s, &t, 4, 1).unwrap();
        let batches = stream.epoch(0);
        assert_eq!(batches.len(), 4);
        for b in &batches {
            assert_eq!(b.target_v1, b.target_v2);
            assert_eq!(b.len(), 4);
            for (k, &i) in b.target_indices.iter().enumerate() {
                assert_eq!(b.target_v1.row(k), t.inputs.row(i));
            }
        }
    }

    #[test]
    fn epoch_covers_each_target_sample_once() {
        let (s, t) = (set(50, 2, 0.0, DomainTag::Source), set(40, 2, 0.0, DomainTag::Target));
        let stream = BatchStream::new(&s, &t, 8, 2).unwrap();
        let mut seen: Vec<usize> = stream.epoch(3).iter().flat_map(|b| b.target_indices.clone()).collect();
        assert_eq!(seen.len(), 40);
        seen.sort_unstable();
        seen.dedup();
        assert_eq!(seen.len(), 40);

        // drop-last with a ragged tail: 37 target rows, batches of 8
        let t = set(37, 2, 0.0, DomainTag::Target);
        let stream = BatchStream::new(&s, &t, 8, 2).unwrap();
        let mut seen: Vec<usize> = stream.epoch(0).iter().flat_map(|b| b.target_indices.clone()).collect();
        assert_eq!(seen.len(), 32);
        seen.sort_unstable();
        seen.dedup();
        assert_eq!(seen.len(), 32);
    }

    #[test]
    fn deterministic_and_epoch_dependent() {
        let (s, t) = (set(30, 2, 0.0, DomainTag::Source), set(30, 2, 0.0, DomainTag::Target));
        let noisy = PerturbSpec {
            feature_noise: 0.1,
            ..PerturbSpec::none()
        };
        let mk = || {
            BatchStream::new(&s, &t, 5, 11)
                .unwrap()
                .with_source_perturb(noisy)
                .unwrap()
                .with_target_perturb(noisy)
                .unwrap()
        };
        assert_eq!(mk().epoch(2), mk().epoch(2));
        assert_ne!(mk().epoch(2), mk().epoch(3));
        let b = &mk().epoch(0)[0];
        assert_ne!(b.target_v1, b.target_v2);
    }

    #[test]
    fn labels_follow_rows() {
        let (s, t) = (set(12, 1, 0.0, DomainTag::Source), set(12, 1, 0.0, DomainTag::Target));
        for b in BatchStream::new(&s, &t, 3, 0).unwrap().epoch(0) {
            for (k, &y) in b.source_labels.iter().enumerate() {
                let i = b.source.row(k)[0] as usize;
                assert_eq!(y, s.labels[i]);
            }
        }
    }

    #[test]
    fn invalid_batch_sizes() {
        let (s, t) = (set(10, 2, 0.0, DomainTag::Source), set(6, 2, 0.0, DomainTag::Target));
        assert!(BatchStream::new(&s, &t, 7, 0).is_err());
        assert!(BatchStream::new(&s, &t, 1, 0).is_err());
        let wide = set(10, 3, 0.0, DomainTag::Target);
        assert!(BatchStream::new(&s, &wide, 2, 0).is_err());
    }
}
