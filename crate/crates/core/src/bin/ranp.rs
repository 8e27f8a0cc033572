fn main() {
    std::process::exit(ranp::cli::run(std::env::args_os()));
}
