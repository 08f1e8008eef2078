fn main() {
    std::process::exit(maxstable::cli::main_with_args(std::env::args_os()));
}
