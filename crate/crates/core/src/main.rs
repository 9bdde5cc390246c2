fn main() {
    std::process::exit(semicd::cli::main_with_args(std::env::args_os()));
}
