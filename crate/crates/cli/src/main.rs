fn main() {
    std::process::exit(hsunmix_cli::cli_main(std::env::args_os()));
}
