fn main() {
    std::process::exit(prunenet::cli::run(std::env::args_os()));
}
