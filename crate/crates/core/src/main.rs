use clap::Parser;
use stomax::cli::{run_cli, Cli};

fn main() {
    let cli = Cli::parse();
    std::process::exit(run_cli(&cli));
}
