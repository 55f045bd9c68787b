fn main() {
    std::process::exit(archoscope_cli::run(std::env::args_os()));
}
