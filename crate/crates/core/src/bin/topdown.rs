fn main() {
    std::process::exit(topdown_slots::cli::main_with_args(std::env::args_os()));
}
