use clap::Parser;

use fdpost::cli::{run, Cli};

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        // single line: context chain joined by ": "
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
