use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use vqa_debias::commands::{self, EvaluateArgs, GenerateArgs, TrainArgs};
use vqa_debias_core::trainer::TrainMode;

#[derive(Parser)]
#[command(name = "vqa-debias", version, about = "Synthetic VQA bias experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Baseline,
    Debiased,
}

impl From<Mode> for TrainMode {
    fn from(m: Mode) -> Self {
        match m {
            Mode::Baseline => TrainMode::Baseline,
            Mode::Debiased => TrainMode::Debiased,
        }
    }
}

fn parse_rho(s: &str) -> Result<f64, String> {
    let v: f64 = s.parse().map_err(|e| format!("{e}"))?;
    if !(0.5..=1.0).contains(&v) {
        return Err(format!("rho must lie in [0.5, 1.0], got {v}"));
    }
    Ok(v)
}

#[derive(Subcommand)]
enum Command {
    /// Generate a biased training split and a balanced test split.
    Generate {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
        n_train: u64,
        #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
        n_test: u64,
        #[arg(long, value_parser = parse_rho)]
        rho: f64,
        #[arg(long)]
        seed: u64,
        /// Re-read the files and check answers and bias rates.
        #[arg(long)]
        verify: bool,
    },
    /// Train a model on the training split.
    Train {
        #[arg(long)]
        data: PathBuf,
        /// `key = value` file; the desk profile when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Overrides the configured mode.
        #[arg(long, value_enum)]
        mode: Option<Mode>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint with own and random images.
    Evaluate {
        /// Checkpoint path, or `stub:oracle`, `stub:image-blind`,
        /// `stub:constant=<answer>`.
        #[arg(long)]
        checkpoint: String,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 0)]
        shuffle_seed: u64,
        #[arg(long)]
        report: PathBuf,
        /// Check the report's internal consistency before writing.
        #[arg(long)]
        verify: bool,
    },
    /// Compare two reports on the same dataset.
    Compare {
        #[arg(long)]
        a: PathBuf,
        #[arg(long)]
        b: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn run(cli: Cli) -> vqa_debias::Result<()> {
    match cli.command {
        Command::Generate {
            out,
            n_train,
            n_test,
            rho,
            seed,
            verify,
        } => {
            let m = commands::generate(&GenerateArgs {
                out,
                n_train: n_train as usize,
                n_test: n_test as usize,
                rho,
                seed,
                verify,
            })?;
            for (path, hash) in &m.outputs {
                println!("{hash}  {path}");
            }
        }
        Command::Train {
            data,
            config,
            mode,
            out,
        } => {
            let args = TrainArgs {
                data,
                config,
                mode: mode.map(Into::into),
                out,
            };
            let outcome = commands::train(&args, |r| {
                eprintln!(
                    "epoch {:>3}  total {:.4}  l1 {:.4}  l_adv {:.4}  l2 {:.4}  acc {:.4}",
                    r.epoch, r.total, r.l1, r.l_adv, r.l2, r.acc_original
                );
            })?;
            println!("{}", args.out.display());
            eprintln!(
                "mode {}  lambda {}  beta {}",
                outcome.config.train.mode.name(),
                outcome.config.train.lambda,
                outcome.config.train.beta
            );
        }
        Command::Evaluate {
            checkpoint,
            data,
            shuffle_seed,
            report,
            verify,
        } => {
            let outcome = commands::evaluate(&EvaluateArgs {
                checkpoint,
                data,
                shuffle_seed,
                report,
                verify,
            })?;
            for w in &outcome.warnings {
                eprintln!("warning: {w}");
            }
            print!("{}", vqa_debias::report::render_report(&outcome.report));
        }
        Command::Compare { a, b, out } => {
            let cmp = commands::compare(&a, &b, &out)?;
            print!("{}", vqa_debias::report::render_comparison(&cmp));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(2)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let mut source = std::error::Error::source(&e);
            while let Some(s) = source {
                eprintln!("  caused by: {s}");
                source = s.source();
            }
            ExitCode::from(1)
        }
    }
}
