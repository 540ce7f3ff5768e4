fn main() {
    std::process::exit(dhub_core::cli::main());
}
