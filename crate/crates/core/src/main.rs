use std::process::ExitCode;

fn main() -> ExitCode {
    privbcast::cli::main()
}
