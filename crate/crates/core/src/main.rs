use std::process::ExitCode;

use clap::Parser;
use spinoc::cli::{run, Cli};

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli.command) {
        Ok(outcome) => {
            println!("{} -> {}", cli.command.name(), outcome.out_dir.display());
            if outcome.passed {
                ExitCode::SUCCESS
            } else {
                eprintln!("{}: some checks failed, see {}", cli.command.name(), outcome.out_dir.display());
                ExitCode::from(1)
            }
        }
        Err(e) => {
            eprintln!("spinoc: {e}");
            ExitCode::from(2)
        }
    }
}
