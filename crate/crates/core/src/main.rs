fn main() {
    std::process::exit(semdet::cli::run());
}
