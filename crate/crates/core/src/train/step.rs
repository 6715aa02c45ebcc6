//! One optimization step over a (source, target view 1, target view 2) triple.

use crate::data::BatchTriple;
use crate::error::{Error, Result};
use crate::layer::{DomainTag, Mode};
use crate::losses::{cross_entropy, entropy_loss, log_softmax, mec_loss, LogProbs, LossValue};
use crate::model::Network;
use crate::tensor::Tensor;

use super::config::{TrainConfig, Variant};
use super::optim::OptimState;

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct StepMetrics {
    pub source_loss: f64,
    /// Unscaled target loss (entropy or consensus); zero for source-only.
    pub target_loss: f64,
    pub total_loss: f64,
    pub grad_norm: f64,
    /// Correct source predictions in the batch.
    pub source_correct: usize,
}

impl StepMetrics {
    pub fn is_finite(&self) -> bool {
        self.source_loss.is_finite() && self.target_loss.is_finite() && self.total_loss.is_finite()
    }
}

/// Target-side forward: the concatenated views in one train-mode pass, so each
/// whitening layer estimates a single target covariance from all of them.
fn target_forward(net: &mut Network, triple: &BatchTriple, variant: Variant) -> Result<Option<(LogProbs, LossValue)>> {
    match variant {
        Variant::SourceOnly => Ok(None),
        Variant::DwtEntropy => {
            let lp = log_softmax(&net.forward(&triple.target_v1, Mode::Train, DomainTag::Target)?)?;
            let loss = entropy_loss(&lp);
            Ok(Some((lp, loss)))
        }
        Variant::DwtMec | Variant::DwtMecMt => {
            let joint = Tensor::concat_rows(&triple.target_v1, &triple.target_v2)?;
            let lp = log_softmax(&net.forward(&joint, Mode::Train, DomainTag::Target)?)?;
            let (lp1, lp2) = lp.split_rows(triple.len())?;
            let loss = mec_loss(&lp1, &lp2)?;
            Ok(Some((lp, loss)))
        }
    }
}

fn correct(lp: &LogProbs, labels: &[usize]) -> usize {
    lp.argmax().iter().zip(labels).filter(|(p, y)| p == y).count()
}

fn joint_grad(loss: &LossValue, lambda: f64) -> Result<Tensor> {
    let scaled: Vec<Tensor> = loss.grads.iter().map(|g| g.scale(lambda)).collect();
    match scaled.as_slice() {
        [g] => Ok(g.clone()),
        [g1, g2] => Tensor::concat_rows(g1, g2),
        _ => Err(Error::State("unexpected number of loss gradients".into())),
    }
}

/// Forward and backward through all streams, accumulating parameter gradients
/// (callers zero them first). Returns the losses without touching parameters.
pub fn compute_gradients(net: &mut Network, triple: &BatchTriple, cfg: &TrainConfig) -> Result<StepMetrics> {
    let lp = log_softmax(&net.forward(&triple.source, Mode::Train, DomainTag::Source)?)?;
    let ls = cross_entropy(&lp, &triple.source_labels)?;
    let source_correct = correct(&lp, &triple.source_labels);
    net.backward(&lp.backward_to_logits(&ls.grads[0])?)?;

    let mut target_loss = 0.0;
    if let Some((lpt, lt)) = target_forward(net, triple, cfg.variant)? {
        net.backward(&lpt.backward_to_logits(&joint_grad(&lt, cfg.lambda)?)?)?;
        target_loss = lt.value;
    }
    Ok(StepMetrics {
        source_loss: ls.value,
        target_loss,
        total_loss: ls.value + cfg.lambda * target_loss,
        grad_norm: net.grad_norm(),
        source_correct,
    })
}

/// Train-mode forward over all streams without any backward pass. Running
/// statistics are updated as in a real step; `grad_norm` is left at zero.
pub fn forward_losses(net: &mut Network, triple: &BatchTriple, cfg: &TrainConfig) -> Result<StepMetrics> {
    let lp = log_softmax(&net.forward(&triple.source, Mode::Train, DomainTag::Source)?)?;
    let ls = cross_entropy(&lp, &triple.source_labels)?;
    let target_loss = target_forward(net, triple, cfg.variant)?.map_or(0.0, |(_, l)| l.value);
    Ok(StepMetrics {
        source_loss: ls.value,
        target_loss,
        total_loss: ls.value + cfg.lambda * target_loss,
        grad_norm: 0.0,
        source_correct: correct(&lp, &triple.source_labels),
    })
}

/// Loss value only, on a scratch copy so running statistics are untouched.
pub fn step_loss(net: &Network, triple: &BatchTriple, cfg: &TrainConfig) -> Result<f64> {
    Ok(forward_losses(&mut net.clone(), triple, cfg)?.total_loss)
}

/// Gradients, then one optimizer update at learning rate `lr`. Losses that
/// are not finite abort before the parameters change.
pub fn train_step(
    net: &mut Network,
    triple: &BatchTriple,
    cfg: &TrainConfig,
    optim: &mut OptimState,
    lr: f64,
) -> Result<StepMetrics> {
    net.zero_grad();
    let metrics = compute_gradients(net, triple, cfg)?;
    if !metrics.is_finite() || !metrics.grad_norm.is_finite() {
        return Err(Error::NonFinite {
            epoch: 0,
            step: optim.step as usize,
            detail: format!("{metrics:?}"),
        });
    }
    optim.step(net.params_mut(), lr, cfg.weight_decay);
    Ok(metrics)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{BatchStream, LabeledSet};
    use crate::gradcheck::{finite_diff_grad, max_relative_error};
    use crate::model::{build_mlp, NormConfig};
    use crate::train::config::OptimizerKind;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn toy_triple(seed: u64, m: usize, d: usize, classes: usize) -> BatchTriple {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut mat = |rows: usize| {
            Tensor::new(
                vec![rows, d],
                (0..rows * d).map(|_| rng.random_range(-1.0..1.0)).collect(),
            )
            .unwrap()
        };
        let source = mat(m);
        let target_v1 = mat(m);
        let target_v2 = mat(m);
        BatchTriple {
            source,
            source_labels: (0..m).map(|i| i % classes).collect(),
            target_v1,
            target_v2,
            target_indices: (0..m).collect(),
        }
    }

    fn toy_net(seed: u64) -> Network {
        let norm = NormConfig {
            n_dwt: 1,
            group_size: 2,
            ..NormConfig::default()
        };
        build_mlp(4, &[4], 3, &norm, seed).unwrap()
    }

    #[test]
    fn full_step_gradient_matches_finite_differences() {
        for variant in [Variant::DwtMec, Variant::DwtEntropy, Variant::SourceOnly] {
            for seed in 0..5 {
                let cfg = TrainConfig {
                    variant,
                    lambda: 0.7,
                    ..TrainConfig::default()
                };
                let triple = toy_triple(seed, 4, 4, 3);
                let mut net = toy_net(seed);
                net.zero_grad();
                compute_gradients(&mut net, &triple, &cfg).unwrap();
                let analytic = Tensor::new(vec![net.param_count()], net.flat_grads()).unwrap();
                let theta = Tensor::new(vec![net.param_count()], net.flat_params()).unwrap();
                let probe = net.clone();
                let numeric = finite_diff_grad(
                    |t: &Tensor| {
                        let mut n = probe.clone();
                        n.set_flat_params(t.data())?;
                        step_loss(&n, &triple, &cfg)
                    },
                    &theta,
                    1e-5,
                )
                .unwrap();
                let err = max_relative_error(&analytic, &numeric);
                assert!(err < 1e-4, "{variant} seed {seed}: {err}");
            }
        }
    }

    #[test]
    fn target_views_share_one_covariance() {
        let mut net = toy_net(1);
        let triple = toy_triple(2, 4, 4, 3);
        let cfg = TrainConfig::default();
        compute_gradients(&mut net, &triple, &cfg).unwrap();
        let (domain, stats) = net.dwt_layers()[0].last_batch_stats().unwrap();
        assert_eq!(domain, DomainTag::Target);
        assert!(stats.iter().all(|s| s.count == 8));
    }

    #[test]
    fn duplicate_views_give_single_view_statistics() {
        let mut triple = toy_triple(3, 6, 4, 3);
        triple.target_v2 = triple.target_v1.clone();
        let mut joint = toy_net(0);
        compute_gradients(&mut joint, &triple, &TrainConfig::default()).unwrap();
        let mut single = toy_net(0);
        single
            .forward(&triple.target_v1, Mode::Train, DomainTag::Target)
            .unwrap();
        let a = joint.dwt_layers()[0].last_batch_stats().unwrap().1.to_vec();
        let b = single.dwt_layers()[0].last_batch_stats().unwrap().1.to_vec();
        for (x, y) in a.iter().zip(&b) {
            for (u, v) in x.mu.iter().zip(&y.mu) {
                assert!((u - v).abs() < 1e-14);
            }
            assert!(x.sigma.max_abs_diff(&y.sigma) < 1e-14);
        }
    }

    #[test]
    fn zero_lambda_matches_source_only_update() {
        let triple = toy_triple(4, 8, 4, 3);
        let run = |variant| {
            let cfg = TrainConfig {
                variant,
                lambda: 0.0,
                ..TrainConfig::default()
            };
            let mut net = toy_net(5);
            let mut opt = OptimState::new(OptimizerKind::Adam, &net.params(), 0.9);
            for _ in 0..3 {
                train_step(&mut net, &triple, &cfg, &mut opt, 1e-2).unwrap();
            }
            net.flat_params()
        };
        let base = run(Variant::SourceOnly);
        assert_eq!(run(Variant::DwtMec), base);
        assert_eq!(run(Variant::DwtEntropy), base);
    }

    #[test]
    fn zero_lambda_target_gradients_vanish() {
        let triple = toy_triple(6, 4, 4, 3);
        let cfg = TrainConfig {
            lambda: 0.0,
            ..TrainConfig::default()
        };
        let mut net = toy_net(2);
        let (lpt, lt) = target_forward(&mut net, &triple, cfg.variant).unwrap().unwrap();
        net.backward(&lpt.backward_to_logits(&joint_grad(&lt, 0.0).unwrap()).unwrap())
            .unwrap();
        assert!(net.flat_grads().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn training_reduces_source_loss() {
        let x = Tensor::new(
            vec![64, 4],
            (0..256).map(|i| ((i * 7919) % 97) as f64 / 97.0 - 0.5).collect(),
        )
        .unwrap();
        let labels: Vec<usize> = (0..64).map(|i| usize::from(x.at(i, 0) + x.at(i, 1) > 0.0)).collect();
        let s = LabeledSet::new(x.clone(), labels.clone(), 3, DomainTag::Source).unwrap();
        let t = LabeledSet::new(x, labels, 3, DomainTag::Target).unwrap();
        let stream = BatchStream::new(&s, &t, 16, 0).unwrap();
        let cfg = TrainConfig::default();
        let mut net = toy_net(3);
        let mut opt = OptimState::new(OptimizerKind::Adam, &net.params(), 0.9);
        let mut first = None;
        let mut last = 0.0;
        for e in 0..150 {
            for b in stream.epoch(e) {
                let m = train_step(&mut net, &b, &cfg, &mut opt, 1e-2).unwrap();
                first.get_or_insert(m.source_loss);
                last = m.source_loss;
            }
        }
        assert!(last < 0.5 * first.unwrap(), "{first:?} -> {last}");
    }
}
