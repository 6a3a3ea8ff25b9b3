fn main() {
    std::process::exit(smoothsde::cli::run_cli(std::env::args_os()));
}
