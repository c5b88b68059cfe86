use std::process::ExitCode;

fn main() -> ExitCode {
    moelab::cli::main()
}
