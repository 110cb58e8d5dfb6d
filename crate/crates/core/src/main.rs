fn main() {
    std::process::exit(quasitrace::cli::main_with_args(std::env::args_os().collect()));
}
