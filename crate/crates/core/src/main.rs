use std::process::ExitCode;

use belief_roadmap::cli::{run, Cli};
use clap::Parser;

fn main() -> ExitCode {
    run(Cli::parse()).into()
}
