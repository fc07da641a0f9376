mod ci;
mod client;
mod infra;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Parser, Subcommand};

/// Infrastructure provisioning and delivery pipelines on one machine.
#[derive(Parser)]
#[command(name = "stagehand", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Plan, apply and destroy infrastructure.
    #[command(subcommand)]
    Infra(infra::InfraCmd),
    /// Validate, serve and operate pipelines.
    #[command(subcommand)]
    Ci(ci::CiCmd),
    #[command(name = "__static-serve", hide = true)]
    StaticServe {
        #[arg(long)]
        root: PathBuf,
        #[arg(long, default_value_t = 0)]
        port: u16,
        #[arg(long)]
        ready_file: PathBuf,
    },
}

pub const USAGE: u8 = 64;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(USAGE),
            };
        }
    };
    match cli.command {
        Command::Infra(cmd) => infra::run(cmd),
        Command::Ci(cmd) => ci::run(cmd),
        Command::StaticServe { root, port, ready_file } => {
            match stagehand_core::providers::run_server_process(&root, port, &ready_file) {
                Ok(()) => ExitCode::SUCCESS,
                Err(e) => {
                    eprintln!("static server: {e}");
                    ExitCode::FAILURE
                }
            }
        }
    }
}
