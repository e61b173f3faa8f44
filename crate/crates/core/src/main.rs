fn main() {
    std::process::exit(alignlab::cli::run());
}
