use clap::Parser;
use smoothcr_cli::{run, Cli, EXIT_FATAL};

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let usage = e.use_stderr();
            let _ = e.print();
            // exit code 2 is reserved for partial reports
            std::process::exit(if usage { EXIT_FATAL } else { 0 });
        }
    };
    std::process::exit(run(cli));
}
