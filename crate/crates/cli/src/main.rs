fn main() {
    std::process::exit(darkmatter_cli::run(std::env::args_os()));
}
