fn main() {
    std::process::exit(lenopt::cli::run());
}
