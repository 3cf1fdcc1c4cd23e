fn main() {
    std::process::exit(segmark::cli::cli_main(std::env::args_os()));
}
