fn main() {
    std::process::exit(ecad::cli::main());
}
