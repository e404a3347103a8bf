use std::process::ExitCode;

use clap::Parser;
use risdt_cli::{run, Cli, ExperimentPlan};

fn main() -> ExitCode {
    let cli = Cli::parse();
    let command = cli.command;
    let result = ExperimentPlan::from_cli(cli).and_then(|plan| run(&plan));
    match result {
        Ok(files) => {
            for f in files {
                println!("{}", f.display());
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("{}", e.record(Some(command)));
            ExitCode::from(e.exit_code())
        }
    }
}
