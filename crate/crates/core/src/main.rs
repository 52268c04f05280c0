fn main() -> std::process::ExitCode {
    metamarl::harness::cli::main_with_args(std::env::args_os())
}
