//! `dwt`: train, evaluate, gradient-check and sweep whitening networks.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use dwt_core::error::Error;
use dwt_core::eval::commands::{ablate_command, eval_command, train_command};
use dwt_core::eval::suite::{run_gradcheck, DEFAULT_SEEDS, FAULT_TARGETS};
use dwt_core::eval::RunConfig;

const EXIT_FAILURE: u8 = 1;
const EXIT_CONFIG: u8 = 2;

#[derive(Parser)]
#[command(
    name = "dwt",
    version,
    about = "Domain-specific whitening and min-entropy consensus for domain adaptation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Compare every analytic gradient against central finite differences.
    Gradcheck {
        /// Corrupt the backward pass of one layer kind (for testing the checker).
        #[arg(long, value_name = "LAYER", value_parser = clap::builder::PossibleValuesParser::new(FAULT_TARGETS))]
        inject_fault: Option<String>,
        /// Random seeds per check.
        #[arg(long, default_value_t = DEFAULT_SEEDS)]
        seeds: usize,
    },
    /// Train one model and write metrics and a checkpoint.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Overrides the seed in the config file.
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory; falls back to $DWT_OUT_DIR, then the config, then `runs/`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score a checkpoint on labelled data.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// `idx:<images>,<labels>`, or a run config whose target set is used.
        #[arg(long)]
        data: String,
    },
    /// Sweep group size × number of whitening layers.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_delimiter = ',', required = true)]
        groups: Vec<usize>,
        #[arg(long, value_delimiter = ',', required = true)]
        layers: Vec<usize>,
        #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
        seeds: Vec<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn pct(x: f64) -> String {
    format!("{:.2}%", 100.0 * x)
}

fn run(cli: Cli) -> Result<u8, Error> {
    match cli.command {
        Command::Gradcheck { inject_fault, seeds } => {
            if seeds == 0 {
                return Err(Error::Config("`--seeds` must be positive".into()));
            }
            let report = run_gradcheck(seeds, inject_fault.as_deref())?;
            println!("{report}");
            Ok(if report.passed() { 0 } else { EXIT_FAILURE })
        }
        Command::Train { config, seed, out } => {
            let mut cfg = RunConfig::from_file(&config)?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            let dir = cfg.out_dir(out.as_deref());
            let outcome = train_command(&cfg, &dir)?;
            let last = outcome.final_metrics();
            println!(
                "epoch {}: source accuracy {}, target accuracy {}",
                last.epoch,
                pct(last.source_accuracy),
                pct(last.target_accuracy)
            );
            println!("final target accuracy: {}", pct(last.target_accuracy));
            println!("wrote {}", dir.display());
            Ok(0)
        }
        Command::Eval { checkpoint, data } => {
            let ev = eval_command(&checkpoint, &data)?;
            println!("samples: {} ({} statistics)", ev.samples, ev.domain.name());
            println!("accuracy: {}", pct(ev.accuracy));
            println!("confusion matrix (rows true, columns predicted):");
            for row in &ev.confusion {
                let cells: Vec<String> = row.iter().map(|c| format!("{c:>6}")).collect();
                println!("{}", cells.join(""));
            }
            Ok(0)
        }
        Command::Ablate {
            config,
            groups,
            layers,
            seeds,
            out,
        } => {
            let cfg = RunConfig::from_file(&config)?;
            let dir = cfg.out_dir(out.as_deref());
            let summary = ablate_command(&cfg, &groups, &layers, &seeds, &dir)?;
            println!("{:>3} {:>6} {:>9} {:>8}  status", "g", "n_dwt", "mean", "std");
            for row in &summary {
                match (row.mean, row.std) {
                    (Some(m), Some(s)) => println!(
                        "{:>3} {:>6} {:>9} {:>7.2}  {}",
                        row.group_size,
                        row.n_dwt,
                        pct(m),
                        100.0 * s,
                        row.status
                    ),
                    _ => println!(
                        "{:>3} {:>6} {:>9} {:>8}  {}",
                        row.group_size, row.n_dwt, "-", "-", row.status
                    ),
                }
            }
            println!("wrote {}", dir.display());
            Ok(0)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            if matches!(e, Error::Config(_)) {
                ExitCode::from(EXIT_CONFIG)
            } else {
                ExitCode::from(EXIT_FAILURE)
            }
        }
    }
}
