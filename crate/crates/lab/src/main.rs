use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use har_lab::checkpoint::Checkpoint;
use har_lab::embed::{export_embeddings, subject_windows};
use har_lab::experiment::load_dataset;
use har_lab::{run_experiment, table, write_synth, ExperimentConfig, LabError, RunReport};
use mixhar_core::synth::SynthSpec;

const EXIT_CONFIG: u8 = 2;
const EXIT_FOLD_FAILURE: u8 = 3;

#[derive(Parser)]
#[command(name = "har-lab", version, about = "Semi-supervised activity recognition experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset (CSV per subject + manifest.json).
    Synth {
        #[arg(long, default_value_t = 8)]
        subjects: usize,
        #[arg(long, default_value_t = 6)]
        classes: usize,
        #[arg(long, default_value_t = 3)]
        channels: usize,
        #[arg(long, default_value_t = 240)]
        samples_per_class: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run leave-one-subject-out training and evaluation.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Run folds sequentially on one thread.
        #[arg(long)]
        deterministic: bool,
        #[arg(long, default_value = "runs/latest")]
        out: PathBuf,
    },
    /// Write FC-layer activations of one subject's windows.
    ExportEmbeddings {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Experiment config naming the dataset and overlap.
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        subject: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Tabulate mean F1 (std) by labelled fraction and algorithm.
    Report {
        /// Run directories (containing report.json) or report files.
        #[arg(long, num_args = 1.., required = true)]
        runs: Vec<PathBuf>,
    },
}

fn report_path(p: &Path) -> PathBuf {
    if p.is_dir() {
        p.join("report.json")
    } else {
        p.to_path_buf()
    }
}

fn run(cli: Cli) -> Result<ExitCode, LabError> {
    match cli.command {
        Command::Synth {
            subjects,
            classes,
            channels,
            samples_per_class,
            seed,
            out,
        } => {
            let spec = SynthSpec {
                subjects,
                classes,
                channels,
                samples_per_class,
                seed,
                ..SynthSpec::default()
            };
            spec.validate()?;
            write_synth(&spec, &out)?;
            println!("wrote {subjects} subjects to {}", out.display());
        }
        Command::Run {
            config,
            deterministic,
            out,
        } => {
            let mut cfg = ExperimentConfig::read(&config)?;
            cfg.deterministic |= deterministic;
            let report = run_experiment(&cfg, Some(&out))?;
            println!(
                "{}: mean F1 {:.4} (std {:.4}) over {} folds; report in {}",
                report.algorithm.label(),
                report.mean_f1,
                report.std_f1,
                report.folds.len() - report.failed_folds.len(),
                out.join("report.json").display()
            );
            if report.has_failures() {
                eprintln!("failed folds: {}", report.failed_folds.join(", "));
                return Ok(ExitCode::from(EXIT_FOLD_FAILURE));
            }
        }
        Command::ExportEmbeddings {
            checkpoint,
            config,
            subject,
            out,
        } => {
            let cfg = ExperimentConfig::read(&config)?;
            let ck = Checkpoint::load(&checkpoint)?;
            let (recordings, _) = load_dataset(&cfg)?;
            let windows = subject_windows(&ck, &recordings, &subject, cfg.overlap)?;
            let n = export_embeddings(&ck, &windows, &out)?;
            println!("wrote {n} embeddings to {}", out.display());
        }
        Command::Report { runs } => {
            let reports = runs
                .iter()
                .map(|p| RunReport::read(&report_path(p)))
                .collect::<Result<Vec<_>, _>>()?;
            print!("{}", table::render(&reports));
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_config() {
                ExitCode::from(EXIT_CONFIG)
            } else {
                ExitCode::FAILURE
            }
        }
    }
}
