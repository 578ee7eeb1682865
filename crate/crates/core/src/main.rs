fn main() {
    std::process::exit(ecfse::cli::main_with_args(std::env::args_os()));
}
