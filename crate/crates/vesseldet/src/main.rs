fn main() {
    std::process::exit(vesseldet::cli::run());
}
