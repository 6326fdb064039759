//! Batch front end: experiment files, orchestration, checkpoints and the
//! `mgrlab` command line.

pub mod check;
pub mod checkpoint;
pub mod config;
pub mod runner;

use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use crate::bench::{export_embeddings, make_benchmark, Dataset, Split};
use crate::diffcore::RngStream;
use crate::error::{Error, Result};
use crate::models::sample_prior;

pub use check::{run_checks, CheckOutcome};
pub use checkpoint::Checkpoint;
pub use config::{load_config, parse_config, ExperimentConfig, GridConfig, OutputConfig, OUTPUT_DIR_ENV};
pub use runner::{
    lambda_grid, metrics_csv, run_experiment, select_lambda, Manifest, RunStatus, Summary, METRICS_HEADER,
};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_FAILURE: i32 = 3;

/// Synthetic rows written by `export-embeddings`.
pub const EXPORT_SYNTHETIC: usize = 1024;

#[derive(Debug, Parser)]
#[command(
    name = "mgrlab",
    version,
    about = "Pseudo consistency regularization and meta pseudo sampling lab"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train every method and seed of an experiment file.
    Run { config: PathBuf },
    /// Grid-search lambda over 0.1..=1.0, then report at the selected values.
    Grid { config: PathBuf },
    /// Write extractor features of real and synthetic samples as CSV.
    ExportEmbeddings { checkpoint: PathBuf, out: PathBuf },
    /// Run the invariant suite.
    Check,
}

/// Exports the training split and [`EXPORT_SYNTHETIC`] finder-steered
/// synthetic samples through the checkpoint's extractor.
pub fn export_checkpoint(ck: &Checkpoint, out: &Path) -> Result<usize> {
    let bench = make_benchmark(&ck.benchmark, ck.seed)?;
    let mut rng = RngStream::new(ck.seed, "export");
    let z = sample_prior(EXPORT_SYNTHETIC, ck.generator.latent_dim(), &mut rng);
    let y: Vec<usize> = (0..EXPORT_SYNTHETIC)
        .map(|_| rng.below(ck.generator.classes()))
        .collect();
    let x = ck.generator.generate_eval(&ck.finder.eval(&z)?, &y)?;
    let synthetic = Dataset {
        x,
        y,
        split: Split::Train,
    };
    export_embeddings(&ck.model, &bench.train, &synthetic, out)
}

fn exit_code(e: &Error) -> i32 {
    if e.is_config() {
        EXIT_CONFIG
    } else {
        EXIT_FAILURE
    }
}

fn run_verb(path: &Path, search: bool) -> i32 {
    let cfg = match load_config(path) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("{e}");
            return exit_code(&e);
        }
    };
    let search = search || cfg.grid.enabled;
    let dir = cfg.output_dir();
    match run_experiment(&cfg, &dir, search) {
        Ok(m) if m.failed_runs() == 0 => {
            println!("wrote {} ({} runs)", dir.display(), m.runs.len());
            EXIT_OK
        }
        Ok(m) => {
            eprintln!(
                "{} of {} runs failed; see {}",
                m.failed_runs(),
                m.runs.len(),
                dir.join("manifest.json").display()
            );
            EXIT_FAILURE
        }
        Err(e) => {
            eprintln!("{e}");
            exit_code(&e)
        }
    }
}

/// Executes a parsed command line and returns the process exit code.
pub fn execute(cli: Cli) -> i32 {
    match cli.command {
        Command::Run { config } => run_verb(&config, false),
        Command::Grid { config } => run_verb(&config, true),
        Command::ExportEmbeddings { checkpoint, out } => {
            match Checkpoint::load(&checkpoint).and_then(|ck| export_checkpoint(&ck, &out)) {
                Ok(rows) => {
                    println!("wrote {rows} rows to {}", out.display());
                    EXIT_OK
                }
                Err(e) => {
                    eprintln!("{e}");
                    exit_code(&e)
                }
            }
        }
        Command::Check => {
            let outcomes = run_checks();
            for o in &outcomes {
                println!(
                    "{} {} ({:.1}s): {}",
                    if o.passed { "PASS" } else { "FAIL" },
                    o.name,
                    o.secs,
                    o.detail
                );
            }
            if outcomes.iter().all(|o| o.passed) {
                EXIT_OK
            } else {
                EXIT_FAILURE
            }
        }
    }
}
