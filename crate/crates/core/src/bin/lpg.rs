fn main() {
    std::process::exit(lpg::cli::run_from(std::env::args_os()));
}
