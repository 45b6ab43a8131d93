use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use darer_cli::commands::{self, GraphKind};
use darer_cli::CliError;
use darer_core::synth::SynthConfig;

#[derive(Parser)]
#[command(
    name = "darer",
    version,
    about = "Joint dialog sentiment and act recognition"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model from a TOML config
    Train {
        #[arg(long)]
        config: PathBuf,
        /// override a config value, e.g. `--set T=0` or `--set train.lr=0.01`
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "runs/darer")]
        out: PathBuf,
    },
    /// Score a checkpoint on a corpus
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// macro or ignore-neutral-weighted
        #[arg(long, default_value = "macro")]
        convention: String,
    },
    /// Write predicted labels as JSON lines
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// output file; stdout if omitted
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate a synthetic corpus
    Gen {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 100)]
        dialogs: usize,
        #[arg(long, default_value_t = 4)]
        min_utterances: usize,
        #[arg(long, default_value_t = 10)]
        max_utterances: usize,
        #[arg(long, default_value_t = 2)]
        speakers: usize,
        #[arg(long, default_value_t = 200)]
        vocab_size: usize,
        #[arg(long, default_value_t = 0.1)]
        noise: f64,
    },
    /// Export one dialog's graph as DOT and count edges per relation
    InspectGraph {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        dialog: String,
        /// satg or drtg
        #[arg(long, default_value = "satg")]
        which: String,
        /// speaker count used for relation typing; defaults to the dialog's
        #[arg(long)]
        speakers: Option<usize>,
        /// DOT output file; stdout if omitted
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    match cli.command {
        Command::Train {
            config,
            set,
            seed,
            out: dir,
        } => {
            commands::cmd_train(&config, &set, seed, &dir, &mut out)?;
        }
        Command::Eval {
            checkpoint,
            data,
            convention,
        } => {
            commands::cmd_eval(&checkpoint, &data, &convention, &mut out)?;
        }
        Command::Predict {
            checkpoint,
            data,
            out: file,
        } => match file {
            Some(p) => {
                let mut w = std::io::BufWriter::new(std::fs::File::create(p)?);
                commands::cmd_predict(&checkpoint, &data, &mut w)?;
                w.flush()?;
            }
            None => commands::cmd_predict(&checkpoint, &data, &mut out)?,
        },
        Command::Gen {
            out: path,
            seed,
            dialogs,
            min_utterances,
            max_utterances,
            speakers,
            vocab_size,
            noise,
        } => {
            let config = SynthConfig {
                seed,
                n_dialogs: dialogs,
                min_utterances,
                max_utterances,
                n_speakers: speakers,
                vocab_size,
                noise,
                ..Default::default()
            };
            commands::cmd_gen(&config, &path, &mut out)?;
        }
        Command::InspectGraph {
            data,
            dialog,
            which,
            speakers,
            out: dot,
        } => {
            let kind: GraphKind = which.parse()?;
            commands::cmd_inspect_graph(&data, &dialog, kind, speakers, dot.as_deref(), &mut out)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("DARER_LOG", "warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
