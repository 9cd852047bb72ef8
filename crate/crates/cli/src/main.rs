fn main() {
    std::process::exit(rlhaif_cli::run(std::env::args_os()));
}
