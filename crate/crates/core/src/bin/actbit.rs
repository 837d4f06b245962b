fn main() {
    std::process::exit(actbit::cli::run_from_args(std::env::args_os()));
}
