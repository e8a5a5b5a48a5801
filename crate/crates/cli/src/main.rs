fn main() -> std::process::ExitCode {
    ufm_cli::dispatch(std::env::args_os())
}
