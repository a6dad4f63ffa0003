fn main() {
    std::process::exit(fusionette::cli::run(std::env::args_os()));
}
