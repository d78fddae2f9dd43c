fn main() {
    std::process::exit(clamp_cli::run(std::env::args_os()));
}
