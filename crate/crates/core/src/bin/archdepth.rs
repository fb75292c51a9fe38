fn main() {
    std::process::exit(archdepth::cli::main_with_args(std::env::args_os()));
}
