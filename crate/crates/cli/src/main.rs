//! `a2r2`: attention-guided iterative refinement of image-to-LaTeX transcriptions.

mod commands;
mod settings;
mod tables;

use std::path::PathBuf;
use std::process::ExitCode;

use a2r2::curation::Direction;
use clap::{Parser, Subcommand};

use commands::Outcome;
use settings::Settings;

#[derive(Parser, Debug)]
#[command(name = "a2r2", version, about = "Attention-guided refinement for image-to-LaTeX transcription")]
struct Cli {
    /// TOML config file with [run], [backend], [render], [prompts] and [curation] tables.
    #[arg(short, long, global = true)]
    config: Option<PathBuf>,
    /// Config override, e.g. `-o run.t_max=3`. Repeatable; applied after the file and environment.
    #[arg(short = 'o', long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    /// Seed for the scripted backend and synthetic data.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// More logging (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Transcribe one image.
    Infer {
        #[arg(long)]
        image: PathBuf,
        /// Ground-truth LaTeX (a string or a file) for scoring.
        #[arg(long)]
        latex: Option<String>,
        #[arg(long, default_value = "a2r2-out")]
        out: PathBuf,
    },
    /// Run the configured strategy over a dataset.
    Batch {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, default_value = "a2r2-out")]
        out: PathBuf,
    },
    /// Score a predictions JSONL (`{"id", "latex"}` per line) against a dataset.
    Metrics {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        /// CSV destination; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Rank scored instances and keep the first k.
    Curate {
        #[arg(long)]
        scores: PathBuf,
        #[arg(long)]
        k: Option<usize>,
        /// asc keeps the least similar (hardest) instances, desc the most similar.
        #[arg(long)]
        direction: Option<Direction>,
        #[arg(long, default_value = "a2r2-curated")]
        out: PathBuf,
    },
    /// Repeat a batch under several round limits.
    Sweep {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "1,2,3,4,5")]
        rounds: Vec<usize>,
        #[arg(long, default_value = "a2r2-sweep")]
        out: PathBuf,
    },
    /// Compare the full loop with localization and verification removed.
    Ablate {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, default_value = "a2r2-ablate")]
        out: PathBuf,
    },
    /// Hallucination rates of the comparison step, per round.
    Audit {
        #[arg(long)]
        run_dir: PathBuf,
        /// Rounds to audit; defaults to the longest run's refinement count.
        #[arg(long)]
        rounds: Option<usize>,
        /// Also write the table as CSV.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print round timelines for saved runs.
    Report {
        #[arg(long)]
        run_dir: PathBuf,
    },
    /// Write a synthetic dataset of rendered formulas.
    Synth {
        #[arg(long, default_value_t = 20)]
        n: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

fn init_logging(verbose: u8) {
    let level = match verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();
}

fn dispatch(cli: Cli) -> anyhow::Result<Outcome> {
    let settings = Settings::load(cli.config.as_deref(), &cli.overrides, cli.seed)?;
    match cli.command {
        Command::Infer { image, latex, out } => commands::infer(&settings, &image, latex.as_deref(), &out),
        Command::Batch { dataset, out } => commands::batch(&settings, &dataset, &out),
        Command::Metrics { pred, dataset, out } => commands::metrics(&settings, &pred, &dataset, out.as_deref()),
        Command::Curate {
            scores,
            k,
            direction,
            out,
        } => commands::curate(
            &settings,
            &scores,
            k.unwrap_or(settings.curation.k),
            direction.unwrap_or(settings.curation.direction),
            &out,
        ),
        Command::Sweep { dataset, rounds, out } => commands::sweep(&settings, &dataset, &rounds, &out),
        Command::Ablate { dataset, out } => commands::ablate(&settings, &dataset, &out),
        Command::Audit { run_dir, rounds, out } => commands::audit(&run_dir, rounds, out.as_deref()),
        Command::Report { run_dir } => commands::report(&run_dir),
        Command::Synth { n, out } => commands::synth(&settings, n, &out),
    }
}

/// Dies quietly on a closed stdout (`a2r2 report | head`) instead of panicking.
fn restore_sigpipe() {
    #[cfg(unix)]
    unsafe {
        libc::signal(libc::SIGPIPE, libc::SIG_DFL);
    }
}

fn main() -> ExitCode {
    restore_sigpipe();
    let cli = Cli::parse();
    init_logging(cli.verbose);
    match dispatch(cli) {
        Ok(Outcome::Success) => ExitCode::SUCCESS,
        Ok(Outcome::Partial) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
