use clap::Parser;
use eags::cli::{self, Cli};
use eags::error::Error;

fn main() {
    let cli = Cli::parse();
    if let Err(e) = cli::run(cli) {
        eprintln!("error: {e}");
        let code = match e {
            Error::Invariant(_) => 3,
            _ => 2,
        };
        std::process::exit(code);
    }
}
