fn main() {
    std::process::exit(clims::cli::run(std::env::args_os()));
}
