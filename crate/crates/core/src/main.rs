fn main() {
    std::process::exit(pairnn::cli::run());
}
