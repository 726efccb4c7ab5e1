//! `ecrank`: ingest curve data, compute traces, train and evaluate the rank
//! classifier, and export saliency, Mestre–Nagao and murmuration data.
//!
//! Exit codes: 0 success, 2 usage error, 3 data error, 4 numeric failure.

mod commands;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::output::UsageError;

#[derive(Parser, Debug)]
#[command(name = "ecrank", version, about = "Elliptic-curve rank prediction from Frobenius traces")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Parse a curve CSV, compute trace vectors and write a feature cache.
    Ingest {
        #[arg(long)]
        csv: PathBuf,
        #[arg(long)]
        bound: u64,
        /// Defaults to `curves_b<B>.apqv` in $ECRANK_CACHE_DIR (or the current directory).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Keep only conductors in [A, B].
        #[arg(long, value_parser = parse_interval)]
        interval: Option<(f64, f64)>,
    },
    /// Print the a_p table of one curve.
    Ap {
        /// a1,a2,a3,a4,a6
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true, num_args = 1)]
        curve: Vec<i64>,
        #[arg(long)]
        conductor: u64,
        #[arg(long)]
        bound: u64,
    },
    /// Train a classifier on a cache; writes checkpoints and manifests into OUT.
    Train {
        #[arg(long)]
        cache: PathBuf,
        #[arg(long, value_parser = parse_interval)]
        interval: Option<(f64, f64)>,
        #[command(flatten)]
        train: TrainArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Accuracy and confusion matrix of a checkpoint.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        cache: PathBuf,
        /// Which curves to score. Defaults to the run's test split when the
        /// model sits in a training run directory, otherwise all curves.
        #[arg(long, value_enum)]
        subset: Option<Subset>,
        #[arg(long, value_parser = parse_interval)]
        interval: Option<(f64, f64)>,
    },
    /// Saliency timeline, grid panels and averaged comparison for a run.
    Saliency {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Use every checkpoint instead of only step 0 of each epoch.
        #[arg(long)]
        all_steps: bool,
    },
    /// Mestre–Nagao sums per curve (or per synthetic sequence).
    Mn {
        #[arg(long)]
        cache: PathBuf,
        #[arg(long)]
        bound: u64,
        /// CSV destination; stdout if omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Average a_p per predicted class.
    Murmur {
        #[arg(long)]
        model: PathBuf,
        /// Curve cache or synthetic batch.
        #[arg(long)]
        input: PathBuf,
        /// Pool primes into windows of this width.
        #[arg(long)]
        bin: Option<u64>,
        #[arg(long, value_parser = parse_interval)]
        interval: Option<(f64, f64)>,
        /// Directory for CSV and SVG; CSV to stdout if omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Sample a synthetic Sato–Tate batch.
    Synth {
        #[arg(long)]
        count: usize,
        #[arg(long)]
        bound: u64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Defaults to `synth_n<N>_b<B>_s<S>.apqs` in $ECRANK_CACHE_DIR (or the current directory).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Best accuracy against the number of primes used.
    Sweep {
        #[arg(long)]
        cache: PathBuf,
        #[arg(long, value_delimiter = ',', num_args = 1, required = true)]
        bounds: Vec<u64>,
        #[arg(long, value_parser = parse_interval)]
        interval: Option<(f64, f64)>,
        #[command(flatten)]
        train: TrainArgs,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args, Debug, Clone)]
pub struct TrainArgs {
    #[arg(long, default_value_t = 100)]
    pub epochs: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 5, value_parser = clap::value_parser!(u8).range(2..=5))]
    pub classes: u8,
    #[arg(long, default_value_t = 3000)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 10)]
    pub steps_per_epoch: usize,
    #[arg(long, default_value_t = 0.001)]
    pub lr: f64,
    /// Fraction of curves used for training.
    #[arg(long, default_value_t = 0.8)]
    pub split: f64,
}

#[derive(clap::ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum Subset {
    Train,
    Test,
    All,
}

fn parse_interval(s: &str) -> Result<(f64, f64), String> {
    let (a, b) = s.split_once(',').ok_or("expected A,B")?;
    let a: f64 = a.trim().parse().map_err(|e| format!("{a}: {e}"))?;
    let b: f64 = b.trim().parse().map_err(|e| format!("{b}: {e}"))?;
    if a.is_nan() || b.is_nan() || a > b {
        return Err(format!("empty interval [{a}, {b}]"));
    }
    Ok((a, b))
}

fn exit_code(err: &anyhow::Error) -> u8 {
    use ecrank_core::Error as E;
    for cause in err.chain() {
        if cause.downcast_ref::<UsageError>().is_some() {
            return 2;
        }
        if let Some(e) = cause.downcast_ref::<E>() {
            return match e.root() {
                E::NonFinite(_) | E::Arithmetic(_) | E::Aborted { .. } => 4,
                _ => 3,
            };
        }
    }
    3
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
