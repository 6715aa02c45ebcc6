//! The work behind each subcommand, kept out of the binary so it can be tested.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::{load_idx, LabeledSet};
use crate::error::{Error, Result};
use crate::layer::DomainTag;
use crate::par;
use crate::train::{predict, target_eval_domain, EpochMetrics, TrainLoop, Variant};

use super::checkpoint;
use super::config::RunConfig;
use super::metrics::{accuracy, confusion_matrix};
use super::records::{CsvLog, MetricsRow, TimingRow};

pub const METRICS_FILE: &str = "metrics.csv";
pub const TIMING_FILE: &str = "timing.csv";
pub const CONFIG_FILE: &str = "config.toml";
pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const DUMP_FILE: &str = "nonfinite_dump.txt";
pub const SUMMARY_FILE: &str = "summary.csv";

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_dump(path: &Path, err: &Error, cfg: &RunConfig, rows: &[EpochMetrics]) -> Result<()> {
    let mut text = format!("{err}\n\nepochs completed before the failure:\n");
    for r in rows {
        let _ = writeln!(text, "{r:?}");
    }
    let _ = write!(text, "\nconfiguration:\n{}", cfg.to_toml()?);
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Result of a `train` run.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub out_dir: PathBuf,
    pub epochs: Vec<EpochMetrics>,
}

impl TrainOutcome {
    pub fn final_metrics(&self) -> &EpochMetrics {
        self.epochs.last().expect("a run always records epoch 0")
    }
}

/// Train per `cfg` into `out`: `metrics.csv` and `timing.csv` grow one row per
/// epoch, then `config.toml` and the evaluation network's `model.ckpt` are
/// written. A non-finite loss leaves `nonfinite_dump.txt` behind and names
/// it in the returned error.
pub fn train_command(cfg: &RunConfig, out: &Path) -> Result<TrainOutcome> {
    cfg.validate()?;
    create_dir(out)?;
    let config_path = out.join(CONFIG_FILE);
    fs::write(&config_path, cfg.to_toml()?).map_err(|e| Error::io(&config_path, e))?;

    let (source, target) = cfg.load_data()?;
    let net = cfg.build_network(
        source.sample_shape(),
        source.classes,
        cfg.train.group_size,
        cfg.model.n_dwt,
    )?;
    let run = TrainLoop {
        cfg: &cfg.train,
        source: &source,
        target: &target,
        perturb: cfg.perturb,
        seed: cfg.seed,
    };

    let mut metrics = CsvLog::create(&out.join(METRICS_FILE))?;
    let mut timing = CsvLog::create(&out.join(TIMING_FILE))?;
    let mut rows = Vec::new();
    let mut clock = Instant::now();
    let result = run.run(net, |m| {
        metrics.append(&MetricsRow::from_epoch(
            m,
            cfg.train.variant,
            cfg.train.group_size,
            cfg.model.n_dwt,
            cfg.seed,
        ))?;
        timing.append(&TimingRow {
            epoch: m.epoch,
            wall_seconds: clock.elapsed().as_secs_f64(),
        })?;
        clock = Instant::now();
        rows.push(m.clone());
        Ok(())
    });
    let record = match result {
        Ok(r) => r,
        Err(e @ Error::NonFinite { .. }) => {
            let dump = out.join(DUMP_FILE);
            write_dump(&dump, &e, cfg, &rows)?;
            return Err(match e {
                Error::NonFinite { epoch, step, detail } => Error::NonFinite {
                    epoch,
                    step,
                    detail: format!("{detail}; state dumped to {}", dump.display()),
                },
                other => other,
            });
        }
        Err(e) => return Err(e),
    };
    checkpoint::save(
        &out.join(CHECKPOINT_FILE),
        cfg.train.variant.name(),
        record.eval_network(),
    )?;
    Ok(TrainOutcome {
        out_dir: out.to_path_buf(),
        epochs: record.epochs,
    })
}

/// Result of scoring a checkpoint.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalOutcome {
    pub samples: usize,
    pub domain: DomainTag,
    pub accuracy: f64,
    /// `[true][predicted]` counts.
    pub confusion: Vec<Vec<usize>>,
}

/// Load the labelled set named by `spec`: either `idx:<images>,<labels>` or
/// the path of a run configuration, whose target set is used.
pub fn load_eval_data(spec: &str) -> Result<LabeledSet> {
    if let Some(rest) = spec.strip_prefix("idx:") {
        let (images, labels) = rest
            .split_once(',')
            .ok_or_else(|| Error::Config(format!("`--data idx:` needs `<images>,<labels>`, got `{rest}`")))?;
        return Ok(load_idx(Path::new(images), Path::new(labels))?.with_domain(DomainTag::Target));
    }
    let cfg = RunConfig::from_file(Path::new(spec))?;
    Ok(cfg.load_data()?.1)
}

/// Score a checkpoint on the data named by `data` (see [`load_eval_data`]).
/// Networks trained with target statistics are evaluated with them.
pub fn eval_command(checkpoint_path: &Path, data: &str) -> Result<EvalOutcome> {
    let ckpt = checkpoint::load(checkpoint_path)?;
    let variant: Variant = ckpt.variant.parse()?;
    let set = load_eval_data(data)?;
    let shape = ckpt.network.input_shape();
    let inputs = if set.sample_shape() == shape {
        set.inputs.clone()
    } else if set.inputs.row_len() == shape.iter().product::<usize>() {
        let mut s = vec![set.len()];
        s.extend_from_slice(shape);
        set.inputs.clone().reshape(&s)?
    } else {
        return Err(Error::shape(format!(
            "checkpoint expects samples of shape {shape:?}, data has {:?}",
            set.sample_shape()
        )));
    };
    if set.classes > ckpt.network.classes() {
        return Err(Error::Evaluation(format!(
            "data has {} classes, network predicts {}",
            set.classes,
            ckpt.network.classes()
        )));
    }
    let domain = target_eval_domain(variant);
    let lp = predict(&ckpt.network, &inputs, domain)?;
    Ok(EvalOutcome {
        samples: set.len(),
        domain,
        accuracy: accuracy(&lp, &set.labels)?,
        confusion: confusion_matrix(&lp, &set.labels)?,
    })
}

/// One line of `summary.csv`. Accuracies are final target accuracies.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub group_size: usize,
    pub n_dwt: usize,
    /// `ok`, or the reason the cell was skipped.
    pub status: String,
    pub seeds: usize,
    pub mean: Option<f64>,
    pub std: Option<f64>,
    pub min: Option<f64>,
    pub max: Option<f64>,
    /// Per-seed accuracies joined with `;`, in seed order.
    pub accuracies: String,
}

impl SummaryRow {
    pub fn is_ok(&self) -> bool {
        self.status == "ok"
    }

    pub fn accuracy_values(&self) -> Vec<f64> {
        self.accuracies
            .split(';')
            .filter(|s| !s.is_empty())
            .filter_map(|s| s.parse().ok())
            .collect()
    }
}

/// Mean and sample standard deviation (zero for a single value).
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

fn cell_file(g: usize, n: usize) -> String {
    format!("cell_g{g}_n{n}.csv")
}

fn run_cell_seed(base: &RunConfig, g: usize, n: usize, seed: u64) -> Result<Vec<MetricsRow>> {
    let mut cfg = base.clone();
    cfg.seed = seed;
    cfg.train.group_size = g;
    cfg.model.n_dwt = n;
    let (source, target) = cfg.load_data()?;
    let net = cfg.build_network(source.sample_shape(), source.classes, g, n)?;
    let run = TrainLoop {
        cfg: &cfg.train,
        source: &source,
        target: &target,
        perturb: cfg.perturb,
        seed,
    };
    let record = run.run(net, |_| Ok(()))?;
    Ok(record
        .epochs
        .iter()
        .map(|m| MetricsRow::from_epoch(m, cfg.train.variant, g, n, seed))
        .collect())
}

/// Train every `(group size, whitening depth)` cell for every seed. Each cell
/// gets `cell_g{g}_n{n}.csv` with all epochs of all seeds, and `summary.csv`
/// holds one row per cell in `(g, n)` order. Cells the architecture cannot
/// host are recorded as skipped rather than failing the sweep.
pub fn ablate_command(
    base: &RunConfig,
    groups: &[usize],
    layers: &[usize],
    seeds: &[u64],
    out: &Path,
) -> Result<Vec<SummaryRow>> {
    if groups.is_empty() || layers.is_empty() || seeds.is_empty() {
        return Err(Error::Config(
            "ablation needs at least one group size, layer count and seed".into(),
        ));
    }
    let mut probe = base.clone();
    probe.train.group_size = 1;
    probe.model.n_dwt = 0;
    probe.validate()?;
    create_dir(out)?;

    let mut cells = Vec::new();
    for &g in groups {
        for &n in layers {
            let status = if g == 0 {
                Err("group size must be positive".to_string())
            } else {
                base.check_grouping(g, n)
            };
            cells.push((g, n, status));
        }
    }
    let jobs: Vec<(usize, usize, u64)> = cells
        .iter()
        .filter(|c| c.2.is_ok())
        .flat_map(|&(g, n, _)| seeds.iter().map(move |&s| (g, n, s)))
        .collect();
    let results = par::map_indexed(jobs.len(), |i| {
        let (g, n, s) = jobs[i];
        run_cell_seed(base, g, n, s)
    });
    let mut results = jobs.iter().zip(results);

    let mut summary = Vec::new();
    for (g, n, status) in cells {
        let row = match status {
            Err(reason) => SummaryRow {
                group_size: g,
                n_dwt: n,
                status: format!("skipped: {reason}"),
                seeds: 0,
                mean: None,
                std: None,
                min: None,
                max: None,
                accuracies: String::new(),
            },
            Ok(()) => {
                let mut log = CsvLog::create(&out.join(cell_file(g, n)))?;
                let mut accs = Vec::new();
                for _ in seeds {
                    let (_, rows) = results.next().expect("one result per job");
                    let rows = rows?;
                    for r in &rows {
                        log.append(r)?;
                    }
                    accs.push(rows.last().expect("epoch 0 is always recorded").target_accuracy);
                }
                let (mean, std) = mean_std(&accs);
                SummaryRow {
                    group_size: g,
                    n_dwt: n,
                    status: "ok".into(),
                    seeds: accs.len(),
                    mean: Some(mean),
                    std: Some(std),
                    min: Some(accs.iter().copied().fold(f64::INFINITY, f64::min)),
                    max: Some(accs.iter().copied().fold(f64::NEG_INFINITY, f64::max)),
                    accuracies: accs.iter().map(f64::to_string).collect::<Vec<_>>().join(";"),
                }
            }
        };
        summary.push(row);
    }
    let mut log = CsvLog::create(&out.join(SUMMARY_FILE))?;
    for row in &summary {
        log.append(row)?;
    }
    Ok(summary)
}
