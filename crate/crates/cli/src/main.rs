//! `mdhgr`: drives a cross-day gesture-recognition experiment from one
//! config file, one stage per subcommand.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use mdhgr_core::train::Strategy;
use mdhgr_core::ErrorKind;

#[derive(Parser)]
#[command(name = "mdhgr", version, about = "Cross-day HD-sEMG gesture recognition experiments")]
struct Cli {
    /// Cap on worker threads (defaults to every core).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

/// Config file plus the few fields a flag may override.
#[derive(Args, Debug, Clone)]
pub struct ConfigArgs {
    #[arg(long, short)]
    pub config: PathBuf,
    /// Overrides `seed`.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Overrides `output_dir`.
    #[arg(long)]
    pub output_dir: Option<PathBuf>,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
pub enum StrategyArg {
    All,
    Individuals,
}

impl From<StrategyArg> for Strategy {
    fn from(s: StrategyArg) -> Strategy {
        match s {
            StrategyArg::All => Strategy::PretrainedOnAll,
            StrategyArg::Individuals => Strategy::PretrainedOnIndividuals,
        }
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
pub enum Protocol {
    /// Pre-trained model on the test day without calibration.
    Interday,
    /// Train and test on the same day.
    Intraday,
}

#[derive(Subcommand)]
enum Command {
    /// Write a config file with default settings.
    Init {
        /// Output path.
        path: PathBuf,
        /// Use the reduced desk-scale profile.
        #[arg(long)]
        desk: bool,
    },
    /// Filter and window every subject into the binary window cache.
    Preprocess(ConfigArgs),
    /// Pre-train on the training day; writes checkpoints and training logs.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Only this strategy (default: every configured strategy).
        #[arg(long, value_enum)]
        strategy: Option<StrategyArg>,
    },
    /// Calibrate pre-trained checkpoints on test-day repetitions.
    Calibrate {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, value_enum, default_value = "all")]
        strategy: StrategyArg,
        /// Overrides `calibration.modes`, e.g. `0,1,2`.
        #[arg(long, value_delimiter = ',')]
        modes: Option<Vec<usize>>,
    },
    /// Per-subject and per-gesture accuracy tables.
    Evaluate {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, value_enum, default_value = "interday")]
        protocol: Protocol,
        #[arg(long, value_enum, default_value = "all")]
        strategy: StrategyArg,
    },
    /// Transformer against the adaptive LDA baseline.
    Compare(ConfigArgs),
    /// Every stage: pre-training, calibration, intraday and baseline.
    Run(ConfigArgs),
    /// Wilcoxon signed-rank test between two result groups.
    Stats {
        /// Rows CSV files written by other subcommands.
        #[arg(required = true)]
        results: Vec<PathBuf>,
        /// First group, as `model/strategy/reps_per_fold`.
        #[arg(long)]
        a: String,
        /// Second group.
        #[arg(long)]
        b: String,
        /// Directory for the report (default: print to stdout).
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn exit_code(err: &anyhow::Error) -> u8 {
    let kind = err
        .chain()
        .find_map(|e| e.downcast_ref::<mdhgr_core::Error>())
        .map(|e| e.kind());
    match kind {
        Some(ErrorKind::Config) => 2,
        Some(ErrorKind::Data) => 3,
        Some(ErrorKind::Numeric) => 4,
        None => 1,
    }
}

fn main() -> ExitCode {
    // Training allocates many short-lived buffers of a few hundred KiB;
    // keeping them on the heap instead of fresh mmaps avoids page-fault churn.
    #[cfg(all(target_os = "linux", target_env = "gnu"))]
    unsafe {
        libc::mallopt(libc::M_MMAP_THRESHOLD, 1 << 30);
        libc::mallopt(libc::M_TRIM_THRESHOLD, 1 << 30);
    }
    let cli = Cli::parse();
    if let Some(jobs) = cli.jobs {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(jobs.max(1)).build_global() {
            eprintln!("error: cannot size the worker pool: {e}");
            return ExitCode::from(1);
        }
    }
    let result = match cli.command {
        Command::Init { path, desk } => commands::init(&path, desk),
        Command::Preprocess(cfg) => commands::preprocess(&cfg),
        Command::Train { cfg, strategy } => commands::train(&cfg, strategy.map(Into::into)),
        Command::Calibrate { cfg, strategy, modes } => commands::calibrate(&cfg, strategy.into(), modes),
        Command::Evaluate { cfg, protocol, strategy } => commands::evaluate(&cfg, protocol, strategy.into()),
        Command::Compare(cfg) => commands::compare(&cfg),
        Command::Run(cfg) => commands::run(&cfg),
        Command::Stats { results, a, b, out } => commands::stats(&results, &a, &b, out.as_deref()),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use mdhgr_core::Error;

    #[test]
    fn exit_codes_follow_the_error_kind() {
        let code = |e: Error| exit_code(&anyhow::Error::new(e).context("while running"));
        assert_eq!(code(Error::Config(vec!["x".into()])), 2);
        assert_eq!(code(Error::InvalidArgument("x".into())), 2);
        assert_eq!(code(Error::Data("x".into())), 3);
        assert_eq!(code(Error::Layout("x".into())), 3);
        assert_eq!(code(Error::Numeric("x".into())), 4);
        assert_eq!(code(Error::Shape("x".into())), 4);
        assert_eq!(exit_code(&anyhow::anyhow!("plain failure")), 1);
    }
}
