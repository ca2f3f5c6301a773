fn main() {
    std::process::exit(cirm_cli::run(std::env::args_os()));
}
