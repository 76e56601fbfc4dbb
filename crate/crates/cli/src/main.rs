fn main() {
    std::process::exit(mllc_cli::main_with_args(std::env::args_os()));
}
