use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use uformer::cli::{self, EnhanceArgs, EvalArgs, MixArgs, TrainArgs};
use uformer::error::{Error, Result};

#[derive(Parser)]
#[command(
    name = "uformer",
    about = "Monaural speech enhancement: dataset mixing, training, enhancement, evaluation, verification",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Mix clean and noise WAVs at the requested SNRs and write a manifest.
    Mix {
        #[arg(long)]
        clean_dir: PathBuf,
        #[arg(long)]
        noise_dir: PathBuf,
        /// Comma-separated SNRs in dB.
        #[arg(long, default_value = "-5,0,5,10")]
        snr_list: String,
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train on a mixing manifest; writes the best-validation checkpoint.
    Train {
        /// `key = value` config file (defaults applied otherwise).
        #[arg(long)]
        config: Option<PathBuf>,
        /// Override single keys, e.g. `--set use_mhsa=false`.
        #[arg(long = "set", value_name = "KEY=VALUE", num_args = 1..)]
        set: Vec<String>,
        #[arg(long)]
        train_manifest: PathBuf,
        #[arg(long)]
        valid_manifest: PathBuf,
        /// Best-validation checkpoint path.
        #[arg(long)]
        out: PathBuf,
        /// Resume from an end-of-epoch checkpoint (see --save-last).
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Also write the latest end-of-epoch state here.
        #[arg(long)]
        save_last: Option<PathBuf>,
        /// History CSV path (defaults to `<out>.history.csv`).
        #[arg(long)]
        history: Option<PathBuf>,
    },
    /// Enhance a mono 16 kHz WAV with a trained checkpoint.
    Enhance {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long = "out")]
        output: PathBuf,
    },
    /// Segmental SNR report over `clean<TAB>estimate` pairs.
    Eval {
        #[arg(long)]
        pairs: PathBuf,
        /// Also write a machine-readable report (`path,ssnr_db`).
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Run the verification suites.
    Verify {
        #[arg(long, default_value = "all")]
        suite: String,
    },
}

fn parse_snr_list(text: &str) -> Result<Vec<f64>> {
    text.split(',')
        .map(|v| {
            v.trim()
                .parse::<f64>()
                .map_err(|_| Error::Config(format!("snr list: `{v}` is not a number")))
        })
        .collect()
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Mix {
            clean_dir,
            noise_dir,
            snr_list,
            out_dir,
            seed,
        } => cli::cmd_mix(&MixArgs {
            clean_dir,
            noise_dir,
            snr_list: parse_snr_list(&snr_list)?,
            out_dir,
            seed,
        }),
        Command::Train {
            config,
            set,
            train_manifest,
            valid_manifest,
            out,
            resume,
            save_last,
            history,
        } => cli::cmd_train(&TrainArgs {
            config,
            set,
            train_manifest,
            valid_manifest,
            out,
            resume,
            save_last,
            history,
        }),
        Command::Enhance {
            checkpoint,
            input,
            output,
        } => cli::cmd_enhance(&EnhanceArgs {
            checkpoint,
            input,
            output,
        }),
        Command::Eval { pairs, csv } => cli::cmd_eval(&EvalArgs { pairs, csv }),
        Command::Verify { suite } => cli::cmd_verify(suite.parse()?),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Usage problems exit with 1; clap's default would be 2.
            let _ = e.print();
            return ExitCode::from(1);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
