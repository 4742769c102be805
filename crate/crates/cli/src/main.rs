fn main() {
    std::process::exit(smcdo_cli::run(std::env::args_os()));
}
