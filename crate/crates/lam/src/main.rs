fn main() {
    std::process::exit(lam::cli::run(std::env::args_os()));
}
