use clap::Parser;

use etsim_cli::args::{Cli, Command};
use etsim_cli::commands;

fn main() {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Gen(args) => commands::run_gen(args),
        Command::Simulate(args) => commands::run_simulate(args),
        Command::Sweep(args) => commands::run_sweep(args),
        Command::Regret(args) => commands::run_regret(args),
    };
    if let Err(err) = result {
        eprintln!("error: {err}");
        std::process::exit(err.exit_code());
    }
}
