fn main() {
    std::process::exit(reindsplit::cli::run());
}
