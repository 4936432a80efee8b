// SPDX-License-Identifier: MIT OR Apache-2.0

use std::process::ExitCode;

fn main() -> ExitCode {
    transcirc::cli::main_with_args(std::env::args_os())
}
