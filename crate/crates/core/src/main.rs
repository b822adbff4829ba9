fn main() {
    std::process::exit(smatch::cli::main());
}
