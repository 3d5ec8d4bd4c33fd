fn main() {
    std::process::exit(adljepa_cli::run(std::env::args_os()));
}
