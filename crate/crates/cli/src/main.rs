fn main() {
    std::process::exit(halvingpool_cli::run_cli(std::env::args_os()));
}
