fn main() {
    std::process::exit(buildiff::cli::main_with_args(std::env::args_os()));
}
