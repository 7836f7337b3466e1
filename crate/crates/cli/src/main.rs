fn main() {
    std::process::exit(cdfcut_cli::run(std::env::args_os()));
}
