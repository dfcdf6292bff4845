use clap::Parser;

use dmdp_cli::{run, Cli, SEED_ENV};

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(&cli, std::env::var(SEED_ENV).ok()) {
        eprintln!("dmdp {}: {e}", cli.command.name());
        std::process::exit(e.exit_code());
    }
}
