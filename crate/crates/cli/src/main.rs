use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use pkmlab_cli::{run, Command, RunOptions};

#[derive(Parser)]
#[command(name = "pkmlab", version, about = "Product-key memory experiments")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Args)]
struct Common {
    /// JSON run configuration.
    #[arg(long)]
    config: PathBuf,
    /// Output directory (default: $PKMLAB_OUT, then ./pkmlab-out/<command>).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Less progress output.
    #[arg(long, short)]
    quiet: bool,
}

#[derive(Subcommand)]
enum Cmd {
    /// Masked-LM pretraining from scratch.
    Pretrain(Common),
    /// Copy a memory-free checkpoint into a memory model, then keep pretraining.
    Graft(Common),
    /// Train a classification head on labeled TSV.
    Finetune(Common),
    /// Held-out loss and memory usage of a checkpoint.
    Analyze(Common),
    /// Class-conditional memory usage divergence.
    Classdiv(Common),
    /// Forward-pass timings.
    Bench(Common),
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (cmd, c) = match cli.command {
        Cmd::Pretrain(c) => (Command::Pretrain, c),
        Cmd::Graft(c) => (Command::Graft, c),
        Cmd::Finetune(c) => (Command::Finetune, c),
        Cmd::Analyze(c) => (Command::Analyze, c),
        Cmd::Classdiv(c) => (Command::Classdiv, c),
        Cmd::Bench(c) => (Command::Bench, c),
    };
    let opts = RunOptions {
        config: c.config,
        out: c.out,
        seed: c.seed,
        verbose: !c.quiet,
    };
    match run(cmd, &opts) {
        Ok(summary) => {
            for f in &summary.files {
                println!("{}", f.display());
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("pkmlab {cmd}: {e:#}");
            ExitCode::FAILURE
        }
    }
}
