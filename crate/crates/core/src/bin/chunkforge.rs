fn main() {
    std::process::exit(chunkforge::cli::main_with_args(std::env::args_os()));
}
