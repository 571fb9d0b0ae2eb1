fn main() {
    std::process::exit(protoadapt::cli::run_cli(std::env::args_os()));
}
