//! The gradient-check suite behind `dwt gradcheck`.

use std::any::Any;
use std::fmt;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::BatchTriple;
use crate::error::{Error, Result};
use crate::gradcheck::{finite_diff_grad, max_relative_error, DEFAULT_STEP};
use crate::layer::{DomainTag, Layer, LayerSpec, Mode, Padding, Parameter, RunningStats};
use crate::losses::{consistency_l2, cross_entropy, entropy_loss, log_softmax, mec_loss, LossValue};
use crate::model::{build_cnn, build_mlp, BatchNorm, Conv2d, Dense, Flatten, MaxPool2d, Network, NormConfig, Relu};
use crate::par;
use crate::tensor::Tensor;
use crate::train::{compute_gradients, step_loss, TrainConfig, Variant};
use crate::whitening::DwtLayer;

pub const TOLERANCE: f64 = 1e-4;
pub const DEFAULT_SEEDS: usize = 20;

/// Layer kinds that accept an injected fault.
pub const FAULT_TARGETS: [&str; 7] = ["dense", "conv2d", "relu", "maxpool", "flatten", "bn", "dwt"];

#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub shapes: String,
    pub seeds: usize,
    pub max_error: f64,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_error < TOLERANCE
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckReport {
    pub checks: Vec<CheckResult>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(CheckResult::passed)
    }

    pub fn failures(&self) -> Vec<&CheckResult> {
        self.checks.iter().filter(|c| !c.passed()).collect()
    }
}

impl fmt::Display for GradcheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "{:<28} {:<30} {:>5} {:>12}  result",
            "check", "shapes", "seeds", "max rel err"
        )?;
        for c in &self.checks {
            writeln!(
                f,
                "{:<28} {:<30} {:>5} {:>12.3e}  {}",
                c.name,
                c.shapes,
                c.seeds,
                c.max_error,
                if c.passed() { "ok" } else { "FAIL" }
            )?;
        }
        let failed = self.failures();
        if failed.is_empty() {
            write!(f, "all {} checks passed (tolerance {TOLERANCE:e})", self.checks.len())
        } else {
            let names: Vec<&str> = failed.iter().map(|c| c.name.as_str()).collect();
            write!(
                f,
                "{} of {} checks FAILED: {}",
                failed.len(),
                self.checks.len(),
                names.join(", ")
            )
        }
    }
}

/// Wraps a layer and scales its input gradient by 1.01: a deliberately
/// broken backward pass for testing the suite itself.
#[derive(Clone)]
struct Faulty(Box<dyn Layer>);

impl Layer for Faulty {
    fn spec(&self) -> LayerSpec {
        self.0.spec()
    }
    fn forward(&mut self, input: &Tensor, mode: Mode, domain: DomainTag) -> Result<Tensor> {
        self.0.forward(input, mode, domain)
    }
    fn backward(&mut self, grad_output: &Tensor) -> Result<Tensor> {
        Ok(self.0.backward(grad_output)?.scale(1.01))
    }
    fn params(&self) -> Vec<&Parameter> {
        self.0.params()
    }
    fn params_mut(&mut self) -> Vec<&mut Parameter> {
        self.0.params_mut()
    }
    fn running(&self) -> Vec<&RunningStats> {
        self.0.running()
    }
    fn running_mut(&mut self) -> Vec<&mut RunningStats> {
        self.0.running_mut()
    }
    fn clone_box(&self) -> Box<dyn Layer> {
        Box::new(self.clone())
    }
    fn as_any(&self) -> &dyn Any {
        self
    }
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// Values bounded away from zero, so ReLU kinks are never straddled.
fn off_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let v = rng.random_range(0.1..1.0);
            if rng.random_bool(0.5) {
                v
            } else {
                -v
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// A shuffled ladder with spacing 0.05, so pooling windows have no near-ties.
fn distinct(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    let mut v: Vec<f64> = (0..n).map(|i| i as f64 * 0.05 - 1.0).collect();
    v.shuffle(rng);
    Tensor::new(shape.to_vec(), v).unwrap()
}

/// Max relative error of input and parameter gradients of `Σ layer(x) ⊙ r`.
fn layer_error(layer: &dyn Layer, x: &Tensor, mode: Mode, rng: &mut ChaCha8Rng) -> Result<f64> {
    let mut base = layer.clone_box();
    for p in base.params_mut() {
        let noise = uniform(rng, p.value.shape(), -0.3, 0.3);
        p.value.add_assign(&noise)?;
    }
    let domain = DomainTag::Source;
    let out_shape = base.clone_box().forward(x, mode, domain)?.shape().to_vec();
    let r = uniform(rng, &out_shape, -1.0, 1.0);

    let mut analytic = base.clone_box();
    for p in analytic.params_mut() {
        p.zero_grad();
    }
    analytic.forward(x, mode, domain)?;
    let dx = analytic.backward(&r)?;

    let objective =
        |l: &mut Box<dyn Layer>, input: &Tensor| -> Result<f64> { Ok(l.forward(input, mode, domain)?.dot(&r)) };
    let numeric = finite_diff_grad(|xp| objective(&mut base.clone_box(), xp), x, DEFAULT_STEP)?;
    let mut err = max_relative_error(&dx, &numeric);

    for (k, p) in analytic.params().iter().enumerate() {
        let numeric = finite_diff_grad(
            |v| {
                let mut l = base.clone_box();
                l.params_mut()[k].value = v.clone();
                objective(&mut l, x)
            },
            &base.params()[k].value,
            DEFAULT_STEP,
        )?;
        err = err.max(max_relative_error(&p.grad, &numeric));
    }
    Ok(err)
}

struct LayerCase {
    name: &'static str,
    kind: &'static str,
    shapes: &'static str,
    mode: Mode,
    make: fn(&mut ChaCha8Rng) -> (Box<dyn Layer>, Tensor),
}

fn layer_cases() -> Vec<LayerCase> {
    vec![
        LayerCase {
            name: "dense",
            kind: "dense",
            shapes: "x 3×5, W 5×4, b 4",
            mode: Mode::Train,
            make: |rng| {
                (
                    Box::new(Dense::new(5, 4, true, rng).unwrap()),
                    uniform(rng, &[3, 5], -1.0, 1.0),
                )
            },
        },
        LayerCase {
            name: "conv2d same",
            kind: "conv2d",
            shapes: "x 2×2×5×5, k3 s1 → 3 ch",
            mode: Mode::Train,
            make: |rng| {
                let l = Conv2d::new(2, 3, 3, 1, Padding::Same, true, rng).unwrap();
                (Box::new(l), uniform(rng, &[2, 2, 5, 5], -1.0, 1.0))
            },
        },
        LayerCase {
            name: "conv2d valid stride 2",
            kind: "conv2d",
            shapes: "x 2×1×7×6, k3 s2 → 2 ch",
            mode: Mode::Train,
            make: |rng| {
                let l = Conv2d::new(1, 2, 3, 2, Padding::Valid, true, rng).unwrap();
                (Box::new(l), uniform(rng, &[2, 1, 7, 6], -1.0, 1.0))
            },
        },
        LayerCase {
            name: "relu",
            kind: "relu",
            shapes: "x 4×6",
            mode: Mode::Train,
            make: |rng| (Box::new(Relu::new()), off_zero(rng, &[4, 6])),
        },
        LayerCase {
            name: "maxpool",
            kind: "maxpool",
            shapes: "x 2×2×5×4, size 2",
            mode: Mode::Train,
            make: |rng| (Box::new(MaxPool2d::new(2).unwrap()), distinct(rng, &[2, 2, 5, 4])),
        },
        LayerCase {
            name: "flatten",
            kind: "flatten",
            shapes: "x 2×3×2×2",
            mode: Mode::Train,
            make: |rng| (Box::new(Flatten::new()), uniform(rng, &[2, 3, 2, 2], -1.0, 1.0)),
        },
        LayerCase {
            name: "bn train",
            kind: "bn",
            shapes: "x 6×4",
            mode: Mode::Train,
            make: |rng| {
                (
                    Box::new(BatchNorm::new(4, 1e-5, 0.1).unwrap()),
                    uniform(rng, &[6, 4], -1.0, 1.0),
                )
            },
        },
        LayerCase {
            name: "bn train spatial",
            kind: "bn",
            shapes: "x 2×3×2×2",
            mode: Mode::Train,
            make: |rng| {
                (
                    Box::new(BatchNorm::new(3, 1e-5, 0.1).unwrap()),
                    uniform(rng, &[2, 3, 2, 2], -1.0, 1.0),
                )
            },
        },
        LayerCase {
            name: "bn eval",
            kind: "bn",
            shapes: "x 5×4",
            mode: Mode::Eval,
            make: |rng| {
                let mut l = BatchNorm::new(4, 1e-5, 0.1).unwrap();
                l.forward(&uniform(rng, &[8, 4], -1.0, 1.0), Mode::Train, DomainTag::Source)
                    .unwrap();
                (Box::new(l), uniform(rng, &[5, 4], -1.0, 1.0))
            },
        },
        LayerCase {
            name: "dwt train g=1",
            kind: "dwt",
            shapes: "x 8×4",
            mode: Mode::Train,
            make: |rng| {
                (
                    Box::new(DwtLayer::new(4, 1, 1e-5, 0.1).unwrap()),
                    uniform(rng, &[8, 4], -1.0, 1.0),
                )
            },
        },
        LayerCase {
            name: "dwt train g=2",
            kind: "dwt",
            shapes: "x 8×4",
            mode: Mode::Train,
            make: |rng| {
                (
                    Box::new(DwtLayer::new(4, 2, 1e-5, 0.1).unwrap()),
                    uniform(rng, &[8, 4], -1.0, 1.0),
                )
            },
        },
        LayerCase {
            name: "dwt train g=4",
            kind: "dwt",
            shapes: "x 8×8",
            mode: Mode::Train,
            make: |rng| {
                (
                    Box::new(DwtLayer::new(8, 4, 1e-5, 0.1).unwrap()),
                    uniform(rng, &[8, 8], -1.0, 1.0),
                )
            },
        },
        LayerCase {
            name: "dwt train spatial g=2",
            kind: "dwt",
            shapes: "x 2×4×2×2",
            mode: Mode::Train,
            make: |rng| {
                (
                    Box::new(DwtLayer::new(4, 2, 1e-5, 0.1).unwrap()),
                    uniform(rng, &[2, 4, 2, 2], -1.0, 1.0),
                )
            },
        },
        LayerCase {
            name: "dwt eval g=4",
            kind: "dwt",
            shapes: "x 5×4",
            mode: Mode::Eval,
            make: |rng| {
                let mut l = DwtLayer::new(4, 4, 1e-5, 0.1).unwrap();
                l.forward(&uniform(rng, &[16, 4], -1.0, 1.0), Mode::Train, DomainTag::Source)
                    .unwrap();
                (Box::new(l), uniform(rng, &[5, 4], -1.0, 1.0))
            },
        },
    ]
}

fn seeded(case: u64, seed: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(case.wrapping_mul(1_000_003).wrapping_add(seed as u64))
}

fn run_seeds(seeds: usize, f: impl Fn(usize) -> Result<f64> + Sync + Send) -> Result<f64> {
    par::map_indexed(seeds, f)
        .into_iter()
        .try_fold(0.0f64, |m, e| Ok(m.max(e?)))
}

/// Gradient of a loss of `logits` through log-softmax; `logits` stacks both
/// views for the two-view losses.
fn loss_error(loss: &(dyn Fn(&Tensor) -> Result<LossValue> + Sync), logits: &Tensor) -> Result<f64> {
    let lv = loss(logits)?;
    let lp = log_softmax(logits)?;
    let g = match lv.grads.as_slice() {
        [g] => g.clone(),
        [a, b] => Tensor::concat_rows(a, b)?,
        _ => return Err(Error::State("unexpected gradient count".into())),
    };
    let analytic = lp.backward_to_logits(&g)?;
    let numeric = finite_diff_grad(|z| Ok(loss(z)?.value), logits, DEFAULT_STEP)?;
    Ok(max_relative_error(&analytic, &numeric))
}

fn two_view(
    f: fn(&crate::losses::LogProbs, &crate::losses::LogProbs) -> Result<LossValue>,
) -> impl Fn(&Tensor) -> Result<LossValue> + Sync {
    move |z: &Tensor| {
        let lp = log_softmax(z)?;
        let (a, b) = lp.split_rows(z.rows() / 2)?;
        f(&a, &b)
    }
}

fn step_error(net: &Network, triple: &BatchTriple, cfg: &TrainConfig) -> Result<f64> {
    let mut n = net.clone();
    n.zero_grad();
    compute_gradients(&mut n, triple, cfg)?;
    let analytic = Tensor::new(vec![n.param_count()], n.flat_grads())?;
    let theta = Tensor::new(vec![net.param_count()], net.flat_params())?;
    let numeric = finite_diff_grad(
        |t| {
            let mut probe = net.clone();
            probe.set_flat_params(t.data())?;
            step_loss(&probe, triple, cfg)
        },
        &theta,
        DEFAULT_STEP,
    )?;
    Ok(max_relative_error(&analytic, &numeric))
}

fn toy_triple(rng: &mut ChaCha8Rng, sample: &[usize], m: usize, classes: usize) -> BatchTriple {
    let mut shape = vec![m];
    shape.extend_from_slice(sample);
    BatchTriple {
        source: uniform(rng, &shape, -1.0, 1.0),
        source_labels: (0..m).map(|i| i % classes).collect(),
        target_v1: uniform(rng, &shape, -1.0, 1.0),
        target_v2: uniform(rng, &shape, -1.0, 1.0),
        target_indices: (0..m).collect(),
    }
}

fn wrap_faults(net: &mut Network, fault: Option<&str>) {
    if let Some(kind) = fault {
        for l in net.layers_mut() {
            if l.name() == kind {
                *l = Box::new(Faulty(l.clone()));
            }
        }
    }
}

/// Run every check with `seeds` seeds. `fault` names a layer kind whose
/// backward pass is corrupted everywhere it appears.
pub fn run_gradcheck(seeds: usize, fault: Option<&str>) -> Result<GradcheckReport> {
    if let Some(k) = fault {
        if !FAULT_TARGETS.contains(&k) {
            return Err(Error::Config(format!(
                "unknown layer `{k}` for fault injection; expected one of {}",
                FAULT_TARGETS.join(", ")
            )));
        }
    }
    let mut checks = Vec::new();

    for (ci, case) in layer_cases().into_iter().enumerate() {
        let inject = fault == Some(case.kind);
        let max_error = run_seeds(seeds, |s| {
            let mut rng = seeded(ci as u64, s);
            let (layer, x) = (case.make)(&mut rng);
            let layer: Box<dyn Layer> = if inject { Box::new(Faulty(layer)) } else { layer };
            layer_error(layer.as_ref(), &x, case.mode, &mut rng)
        })?;
        checks.push(CheckResult {
            name: case.name.to_string(),
            shapes: case.shapes.to_string(),
            seeds,
            max_error,
        });
    }

    type LossFn = Box<dyn Fn(&Tensor) -> Result<LossValue> + Sync>;
    let losses: Vec<(&str, &str, usize, LossFn)> = vec![
        (
            "cross_entropy",
            "logits 5×4",
            5,
            Box::new(|z: &Tensor| cross_entropy(&log_softmax(z)?, &[0, 3, 1, 1, 2])),
        ),
        (
            "entropy",
            "logits 5×4",
            5,
            Box::new(|z: &Tensor| Ok(entropy_loss(&log_softmax(z)?))),
        ),
        (
            "consistency_l2",
            "2 views × 5×4",
            10,
            Box::new(two_view(consistency_l2)),
        ),
        ("mec", "2 views × 5×4", 10, Box::new(two_view(mec_loss))),
    ];
    for (li, (name, shapes, rows, loss)) in losses.iter().enumerate() {
        let max_error = run_seeds(seeds, |s| {
            let mut rng = seeded(100 + li as u64, s);
            let z = uniform(&mut rng, &[*rows, 4], -2.0, 2.0);
            loss_error(loss.as_ref(), &z)
        })?;
        checks.push(CheckResult {
            name: name.to_string(),
            shapes: shapes.to_string(),
            seeds,
            max_error,
        });
    }

    let norm = NormConfig {
        n_dwt: 1,
        group_size: 2,
        ..NormConfig::default()
    };
    for (vi, variant) in [Variant::DwtMec, Variant::DwtEntropy, Variant::SourceOnly]
        .into_iter()
        .enumerate()
    {
        let cfg = TrainConfig {
            variant,
            lambda: 0.5,
            ..TrainConfig::default()
        };
        let max_error = run_seeds(seeds, |s| {
            let mut rng = seeded(200 + vi as u64, s);
            let mut net = build_mlp(4, &[4, 4], 3, &norm, s as u64)?;
            wrap_faults(&mut net, fault);
            step_error(&net, &toy_triple(&mut rng, &[4], 4, 3), &cfg)
        })?;
        checks.push(CheckResult {
            name: format!("train_step mlp {variant}"),
            shapes: "m=4, d=4, [4,4], C=3".into(),
            seeds,
            max_error,
        });
    }
    let cfg = TrainConfig {
        lambda: 0.5,
        ..TrainConfig::default()
    };
    let max_error = run_seeds(seeds, |s| {
        let mut rng = seeded(300, s);
        let mut net = build_cnn((1, 6, 6), &[2, 2], 3, &norm, s as u64)?;
        wrap_faults(&mut net, fault);
        step_error(&net, &toy_triple(&mut rng, &[1, 6, 6], 3, 3), &cfg)
    })?;
    checks.push(CheckResult {
        name: "train_step cnn dwt-mec".into(),
        shapes: "m=3, 1×6×6, [2,2], C=3".into(),
        seeds,
        max_error,
    });

    Ok(GradcheckReport { checks })
}
