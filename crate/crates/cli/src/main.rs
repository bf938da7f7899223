fn main() {
    std::process::exit(mima_cli::main_with_args(std::env::args_os()));
}
