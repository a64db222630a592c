mod commands;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use commands::DataArgs;
use restyle::Error;

/// Exit status for command-line usage errors (sysexits EX_USAGE).
const EXIT_USAGE: u8 = 64;

#[derive(Parser, Debug)]
#[command(name = "restyle", version, about = "Train and run keyframe-guided video style operators")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train an operator on a frame sequence and its stylized keyframes.
    Train(DataArgs),
    /// Stylize a PNG directory or a raw frame stream.
    Stylize(StylizeArgs),
    /// Experiment harnesses.
    #[command(subcommand)]
    Experiments(Experiment),
}

#[derive(Args, Debug)]
#[command(group(clap::ArgGroup::new("mode").required(true).args(["frames", "pipe"])))]
struct StylizeArgs {
    /// Checkpoint produced by `train`.
    #[arg(long)]
    model: PathBuf,
    /// Directory of PNG frames.
    #[arg(long, requires = "out")]
    frames: Option<PathBuf>,
    /// Output directory; file names are preserved.
    #[arg(long, requires = "frames")]
    out: Option<PathBuf>,
    /// Read an SRRAW1 stream on stdin and write one on stdout.
    #[arg(long, conflicts_with_all = ["frames", "out"])]
    pipe: bool,
}

#[derive(Subcommand, Debug)]
enum Experiment {
    /// Drop each loss weight in turn, then train with all three.
    Ablate(DataArgs),
    /// Sweep lambda_c and t.
    Grid {
        #[command(flatten)]
        data: DataArgs,
        /// Comma-separated lambda_c values.
        #[arg(long = "lambda-c", allow_hyphen_values = true)]
        lambda_c: String,
        /// Comma-separated timestep indices.
        #[arg(long)]
        t: String,
    },
    /// One run per guidance kind.
    Conditioning {
        #[command(flatten)]
        data: DataArgs,
        /// Comma-separated guidance kinds; all kinds by default.
        #[arg(long)]
        kinds: Option<String>,
    },
    /// Replace the distillation term with direct guidance-map matching.
    LineartBaseline(DataArgs),
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_)
        | Error::Contract(_)
        | Error::Pairing { .. }
        | Error::Dimension(_)
        | Error::Decode { .. } => 2,
        Error::BackendUnavailable { .. } => 3,
        Error::Checkpoint(_) => 4,
        Error::Stream(_) => 5,
        _ => 1,
    }
}

fn run(cli: Cli) -> restyle::Result<()> {
    match cli.command {
        Command::Train(a) => println!("{}", commands::train(&a)?.display()),
        Command::Stylize(a) => match (a.pipe, a.frames, a.out) {
            (true, _, _) => {
                let n = commands::stylize_pipe(&a.model)?;
                log::info!("stylized {n} frames");
            }
            (false, Some(frames), Some(out)) => {
                let n = commands::stylize_dir(&a.model, &frames, &out)?;
                log::info!("wrote {n} frames to {}", out.display());
            }
            _ => unreachable!("clap enforces the mode group"),
        },
        Command::Experiments(x) => {
            let report = match x {
                Experiment::Ablate(d) => commands::ablate(&d)?,
                Experiment::Grid { data, lambda_c, t } => commands::grid(&data, &lambda_c, &t)?,
                Experiment::Conditioning { data, kinds } => commands::conditioning(&data, kinds.as_deref())?,
                Experiment::LineartBaseline(d) => commands::lineart_baseline(&d)?,
            };
            println!("{}", report.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(EXIT_USAGE)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
