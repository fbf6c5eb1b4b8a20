fn main() {
    std::process::exit(rightmost::cli::run_from(std::env::args_os()));
}
