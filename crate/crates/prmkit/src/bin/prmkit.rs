fn main() {
    std::process::exit(prmkit::cli::run(std::env::args().collect()));
}
