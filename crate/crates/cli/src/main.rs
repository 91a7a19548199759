use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde_json::json;
use tpd_core::commands::{self, CommandError, Views};
use tpd_core::config::Config;

#[derive(Parser)]
#[command(name = "tpd", version, about = "Text-conditioned tri-plane generator toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train from a config file.
    Train {
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Start from the networks stored in this checkpoint.
        #[arg(long)]
        init: Option<PathBuf>,
    },
    /// Render a prompt from a checkpoint.
    Generate {
        checkpoint: PathBuf,
        #[arg(long)]
        prompt: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "single")]
        views: Views,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a checkpoint against a corpus directory.
    Evaluate {
        checkpoint: PathBuf,
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Maximum number of corpus items used.
        #[arg(long, default_value_t = 64)]
        limit: usize,
    },
    /// Cumulatively extend a prompt at a fixed latent.
    Mix {
        checkpoint: PathBuf,
        #[arg(long)]
        base: String,
        #[arg(long = "add")]
        add: Vec<String>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Interpolate between two style latents at a fixed prompt.
    Interpolate {
        checkpoint: PathBuf,
        #[arg(long)]
        prompt: String,
        #[arg(long)]
        z1_seed: u64,
        #[arg(long)]
        z2_seed: u64,
        #[arg(long, default_value_t = 8)]
        steps: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write a synthetic captioned corpus.
    Corpus {
        #[arg(long, default_value_t = 4)]
        slots: usize,
        #[arg(long, default_value_t = 256)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

fn check_threads() -> Result<(), CommandError> {
    match std::env::var("TPD_THREADS") {
        Ok(v) => match v.parse::<usize>() {
            // all work runs on the calling thread, so any cap of at least one holds
            Ok(n) if n >= 1 => Ok(()),
            _ => Err(CommandError::Usage(format!("TPD_THREADS must be a positive integer, got `{v}`"))),
        },
        Err(_) => Ok(()),
    }
}

fn files(paths: &[PathBuf]) -> Vec<String> {
    paths.iter().map(|p| p.display().to_string()).collect()
}

fn run(cli: Cli) -> Result<serde_json::Value, CommandError> {
    check_threads()?;
    Ok(match cli.command {
        Command::Train { config, out, init } => {
            let config = Config::load(&config)?;
            let s = commands::cmd_train(&config, &out, init.as_deref())?;
            json!(s)
        }
        Command::Generate { checkpoint, prompt, seed, views, out } => {
            let g = commands::cmd_generate(&checkpoint, &prompt, seed, views, &out)?;
            json!({"files": files(&g.files), "seconds": g.elapsed.as_secs_f64()})
        }
        Command::Evaluate { checkpoint, corpus, out, limit } => {
            let r = commands::cmd_evaluate(&checkpoint, &corpus, &out, limit)?;
            json!({"fid_analog": r.fid_analog, "msc_mean": r.msc_mean, "rp_analog": r.rp_analog,
                   "diversity": r.diversity, "coverage": r.coverage})
        }
        Command::Mix { checkpoint, base, add, seed, out } => {
            let r = commands::cmd_mix(&checkpoint, &base, &add, seed, &out)?;
            json!({"monotone": r.monotone(), "steps": r.steps.len()})
        }
        Command::Interpolate { checkpoint, prompt, z1_seed, z2_seed, steps, out } => {
            let f = commands::cmd_interpolate(&checkpoint, &prompt, z1_seed, z2_seed, steps, &out)?;
            json!({"files": files(&f)})
        }
        Command::Corpus { slots, n, seed, size, out } => {
            commands::cmd_corpus(slots, n, seed, size, &out)?;
            json!({"corpus": out.display().to_string(), "scenes": n})
        }
    })
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(v) => {
            println!("{v}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
