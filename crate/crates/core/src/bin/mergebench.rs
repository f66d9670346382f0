fn main() {
    std::process::exit(mergebench::cli::run(std::env::args_os()));
}
