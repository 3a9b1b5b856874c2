fn main() {
    std::process::exit(isacl::cli::main_with_args(std::env::args_os()));
}
