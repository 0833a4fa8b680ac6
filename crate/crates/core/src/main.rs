use std::process::ExitCode;

fn main() -> ExitCode {
    mmcurate::cli::run_cli()
}
