//! `cvec` — speaker diarisation pipeline driver.
//!
//! Subcommands: `train` (VAD + CPD + embedding system), `diarize`
//! (RTTM hypotheses for recordings), `score` (DER against a reference),
//! and `selftest` (the built-in oracle suite).
//!
//! Exit codes: 0 success, 2 input error, 3 model error, 4 selftest failure.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

mod run;

#[derive(Parser)]
#[command(name = "cvec", version, about = "Speaker diarisation with combined deep speaker embeddings")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train VAD, CPD and the selected embedding system on the corpus.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Overrides the config seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Overrides the config system selection.
        #[arg(long)]
        system: Option<String>,
        /// Overrides the config epoch count.
        #[arg(long)]
        epochs: Option<usize>,
        /// Generate the synthetic corpus into corpus_dir if it is missing.
        #[arg(long)]
        synth: bool,
    },
    /// Diarize recordings and write one RTTM hypothesis per recording.
    Diarize {
        #[arg(long)]
        config: PathBuf,
        /// Recording ids (directories under corpus_dir); all when empty.
        recordings: Vec<String>,
        /// Recording-level worker threads.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Score a hypothesis RTTM against a reference RTTM.
    Score {
        #[arg(long)]
        reference: PathBuf,
        #[arg(long)]
        hypothesis: PathBuf,
        /// No-score collar around reference boundaries, seconds.
        #[arg(long, default_value_t = 0.25)]
        collar: f64,
        /// Also score regions where reference speakers overlap.
        #[arg(long)]
        score_overlap: bool,
    },
    /// Run the built-in oracle suite and print a pass/fail table.
    Selftest,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Train { config, seed, system, epochs, synth } => {
            run::train(&config, seed, system, epochs, synth)
        }
        Command::Diarize { config, recordings, jobs } => run::diarize(&config, &recordings, jobs),
        Command::Score { reference, hypothesis, collar, score_overlap } => {
            run::score(&reference, &hypothesis, collar, score_overlap)
        }
        Command::Selftest => run::selftest(),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("cvec: {:#}", err.message);
            ExitCode::from(err.code)
        }
    }
}
