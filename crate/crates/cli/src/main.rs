fn main() {
    std::process::exit(csanet_cli::cli::run(std::env::args_os()));
}
