fn main() {
    std::process::exit(autoselect::cli::main_with_args(std::env::args_os()));
}
