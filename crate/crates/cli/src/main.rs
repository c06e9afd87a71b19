fn main() {
    std::process::exit(pr2r_cli::main_with_args(std::env::args_os()));
}
