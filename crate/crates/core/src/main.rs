fn main() {
    std::process::exit(afinar::cli::run());
}
