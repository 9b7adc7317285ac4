fn main() {
    std::process::exit(neoc_core::cli::run(std::env::args()));
}
