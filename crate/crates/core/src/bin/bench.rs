use std::fs::{self, File};
use std::io::{self, BufReader, BufWriter, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use robust_sparse::bench::{
    parse_solver_list, read_records, run_experiment, summarize, write_records, write_summary,
    ExperimentSpec, Scale, Timing,
};
use robust_sparse::Result;

/// Noise-robustness benchmark for sparse recovery solvers.
#[derive(Debug, Parser)]
#[command(name = "bench", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run a noise sweep and write one CSV row per (solver, level, trial).
    Run {
        /// Key-value spec file; its keys override the preset.
        #[arg(long)]
        spec: Option<PathBuf>,
        /// Results CSV.
        #[arg(long)]
        out: PathBuf,
        /// Preset the spec file is applied on.
        #[arg(long, default_value = "desk", value_parser = parse_scale)]
        scale: Scale,
        /// Override the master seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Comma-separated subset of npsr,omp,lasso,bp.
        #[arg(long)]
        solvers: Option<String>,
        /// Override the number of trials per level.
        #[arg(long)]
        trials: Option<usize>,
        /// Write zero wall times so the CSV depends only on the spec.
        #[arg(long)]
        no_timing: bool,
        /// Also write the summary table here.
        #[arg(long)]
        summary: Option<PathBuf>,
    },
    /// Aggregate a results CSV into per-(solver, level) means.
    Summarize {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print the effective spec in spec-file format.
    Spec {
        #[arg(long, default_value = "desk", value_parser = parse_scale)]
        scale: Scale,
    },
}

fn parse_scale(s: &str) -> std::result::Result<Scale, String> {
    s.parse().map_err(|e: robust_sparse::Error| e.to_string())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Run {
            spec,
            out,
            scale,
            seed,
            solvers,
            trials,
            no_timing,
            summary,
        } => {
            let base = ExperimentSpec::preset(scale);
            let mut spec = match spec {
                Some(path) => ExperimentSpec::parse_with_base(&fs::read_to_string(path)?, base)?,
                None => base,
            };
            if let Some(seed) = seed {
                spec.master_seed = seed;
            }
            if let Some(list) = solvers {
                spec.solvers = parse_solver_list(&list)?;
            }
            if let Some(trials) = trials {
                spec.trials = trials;
            }
            spec.validate()?;
            log::info!(
                "running {} records (M={}, N={}, K={}, {} noise)",
                spec.record_count(),
                spec.m,
                spec.n,
                spec.k,
                spec.noise_kind.name()
            );

            let records = run_experiment(&spec)?;
            let timing = if no_timing {
                Timing::Zeroed
            } else {
                Timing::Measured
            };
            write_records(&records, BufWriter::new(File::create(&out)?), timing)?;
            let failed = records.iter().filter(|r| r.failed()).count();
            if failed > 0 {
                log::warn!(
                    "{failed} solver runs failed; see the NaN rows in {}",
                    out.display()
                );
            }
            if let Some(path) = summary {
                // aggregate what was written, so the summary agrees with a
                // re-aggregation of the CSV
                let written = read_records(BufReader::new(File::open(&out)?))?;
                write_summary(&summarize(&written)?, BufWriter::new(File::create(path)?))?;
            }
        }
        Command::Summarize { input, out } => {
            let records = read_records(BufReader::new(File::open(input)?))?;
            write_summary(&summarize(&records)?, BufWriter::new(File::create(out)?))?;
        }
        Command::Spec { scale } => {
            let mut stdout = io::stdout().lock();
            stdout.write_all(ExperimentSpec::preset(scale).to_spec_text().as_bytes())?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{e}");
            ExitCode::FAILURE
        }
    }
}
