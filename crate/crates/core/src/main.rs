fn main() {
    std::process::exit(filterop::cli::main_with_args(std::env::args_os()));
}
