//! `distilab` command-line driver.
//!
//! Exit codes: 0 success, 2 usage or configuration error, 3 numerical failure.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use distilab::data::Split;

#[derive(Parser)]
#[command(name = "distilab", version, about = "Ensemble distillation experiments on synthetic mixtures")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the teacher ensemble for every seed of a run config.
    TrainTeachers {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Distill the teachers into a student with the configured method.
    Distill {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        teachers: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write the metrics row of a checkpoint on one split.
    Evaluate {
        #[arg(long)]
        model: PathBuf,
        /// `mixture[:key=value,...]` or a run config path.
        #[arg(long)]
        data: String,
        #[arg(long, default_value = "test", value_parser = parse_split)]
        split: Split,
        /// Also evaluate shifted inputs with this shift and write entropy histograms.
        #[arg(long)]
        ood: Option<f64>,
        #[arg(long, value_parser = clap::value_parser!(u32).range(1..=5))]
        corrupt: Option<u32>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Scan the line between the two members of a BatchEnsemble checkpoint.
    LineScan {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Mean teacher and student diversity shift per train batch under a perturbation.
    PerturbDiag {
        #[arg(long)]
        teachers: PathBuf,
        #[arg(long)]
        student: PathBuf,
        #[arg(long)]
        data: String,
        /// gaussian, ods, conf_ods, tdiv or tdiv_sdiv.
        #[arg(long)]
        kind: String,
        #[arg(long)]
        gamma: Option<f64>,
        #[arg(long, default_value_t = 4.0)]
        tau: f64,
        #[arg(long, default_value_t = 128)]
        batch_size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Collapse a BatchEnsemble checkpoint into one network by averaging its rank-one factors.
    Average {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn parse_split(s: &str) -> Result<Split, String> {
    match s {
        "train" => Ok(Split::Train),
        "val" => Ok(Split::Val),
        "test" => Ok(Split::Test),
        _ => Err(format!("expected train, val or test, got {s:?}")),
    }
}

/// Worker threads from `DISTILAB_THREADS`, 1 when unset.
pub(crate) fn threads() -> usize {
    std::env::var("DISTILAB_THREADS")
        .ok()
        .and_then(|v| v.parse().ok())
        .filter(|&n| n > 0)
        .unwrap_or(1)
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::TrainTeachers { config, out } => commands::train_teachers_cmd(&config, &out),
        Command::Distill { config, teachers, out } => commands::distill_cmd(&config, &teachers, &out),
        Command::Evaluate {
            model,
            data,
            split,
            ood,
            corrupt,
            out,
        } => commands::evaluate_cmd(&commands::EvalArgs {
            model: &model,
            data: &data,
            split,
            ood,
            corrupt,
            out: &out,
        }),
        Command::LineScan { model, data, out } => commands::line_scan_cmd(&model, &data, &out),
        Command::PerturbDiag {
            teachers,
            student,
            data,
            kind,
            gamma,
            tau,
            batch_size,
            seed,
            out,
        } => commands::perturb_diag_cmd(&commands::DiagArgs {
            teachers: &teachers,
            student: &student,
            data: &data,
            kind: &kind,
            gamma,
            tau,
            batch_size,
            seed,
            out: &out,
        }),
        Command::Average { model, out } => commands::average_cmd(&model, &out),
    }
}

fn is_numerical(err: &anyhow::Error) -> bool {
    err.chain()
        .any(|e| e.downcast_ref::<distilab::Error>().is_some_and(distilab::Error::is_numerical))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    #[cfg(feature = "parallel")]
    if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(threads()).build_global() {
        eprintln!("warning: could not size the thread pool: {e}");
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(if is_numerical(&e) { 3 } else { 2 })
        }
    }
}
