fn main() {
    std::process::exit(cdln_cli::run_cli(std::env::args_os()));
}
