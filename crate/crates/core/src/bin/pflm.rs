fn main() {
    std::process::exit(pflm::cli::main_with_args(std::env::args_os()));
}
