fn main() {
    std::process::exit(sdg_cli::run(std::env::args_os()));
}
