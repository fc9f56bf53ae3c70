fn main() {
    std::process::exit(fedsup_cli::main_with_args(std::env::args_os()));
}
