fn main() {
    std::process::exit(ith::bench::cli::run_cli(std::env::args_os()));
}
