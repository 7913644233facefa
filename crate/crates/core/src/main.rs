fn main() {
    std::process::exit(pdl::cli::main_with_args(std::env::args_os()));
}
