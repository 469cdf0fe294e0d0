fn main() {
    std::process::exit(trumpetflow_cli::run(std::env::args_os()));
}
