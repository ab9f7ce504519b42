fn main() {
    std::process::exit(poregen::cli::main_with_args(std::env::args_os()));
}
