fn main() {
    std::process::exit(micrometric::cli::main_with_args(std::env::args_os()));
}
