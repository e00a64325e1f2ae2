//! `dtm`: command-line front end for the disperse-then-merge toolkit.

use std::process::ExitCode;

fn main() -> ExitCode {
    dtm_cli::run(std::env::args_os())
}
