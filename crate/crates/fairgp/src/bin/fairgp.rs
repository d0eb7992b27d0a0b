fn main() {
    std::process::exit(fairgp::cli::run());
}
