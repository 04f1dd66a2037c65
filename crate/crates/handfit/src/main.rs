fn main() {
    std::process::exit(handfit::cli::run());
}
