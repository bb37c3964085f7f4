use clap::Parser;

use sinkprune::cli::{run, Cli};

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(&cli) {
        let msg = e.to_string().replace('\n', " ");
        eprintln!("sinkprune: {msg}");
        std::process::exit(1);
    }
}
