fn main() {
    std::process::exit(recollide::cli::main_with_args(std::env::args_os()));
}
