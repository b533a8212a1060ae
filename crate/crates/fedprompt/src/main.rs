fn main() {
    std::process::exit(fedprompt::cli::cli_main(std::env::args()));
}
