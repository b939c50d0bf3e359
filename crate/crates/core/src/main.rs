fn main() {
    std::process::exit(conna_core::cli::main_with_args(std::env::args_os()));
}
