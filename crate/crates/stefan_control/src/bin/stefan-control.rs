use clap::Parser;
use stefan_control::cli::{run, Cli};

fn main() {
    std::process::exit(run(&Cli::parse()));
}
