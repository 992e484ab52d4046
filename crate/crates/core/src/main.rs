fn main() {
    std::process::exit(dtameta::cli::run_cli(std::env::args_os()));
}
