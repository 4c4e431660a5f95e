use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use recon_cli::{exit_code, run, Command};

#[derive(Parser)]
#[command(name = "recon", version, about = "Score-based reconstruction of gridded spatiotemporal fields")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic dataset and its manifest.
    GenData(Common),
    /// Train a denoiser checkpoint.
    Train(Common),
    /// Sample reconstructions from observation blocks.
    Reconstruct(Common),
    /// Compare a generated field with ground truth.
    Evaluate(Common),
    /// Run the method x prior x factor x missing-ratio grid.
    Benchmark(Common),
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    config: PathBuf,
    /// Override a config entry; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Root seed; overrides `seed` in the config.
    #[arg(long)]
    seed: Option<u64>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (cmd, args) = match cli.command {
        Cmd::GenData(a) => (Command::GenData, a),
        Cmd::Train(a) => (Command::Train, a),
        Cmd::Reconstruct(a) => (Command::Reconstruct, a),
        Cmd::Evaluate(a) => (Command::Evaluate, a),
        Cmd::Benchmark(a) => (Command::Benchmark, a),
    };
    match run(cmd, &args.config, &args.set, args.seed) {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("recon {}: {e}", cmd.name());
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
