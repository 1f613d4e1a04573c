fn main() {
    std::process::exit(occl::cli::main_with_args(std::env::args_os()));
}
