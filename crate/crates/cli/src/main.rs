fn main() {
    std::process::exit(prefopt_cli::run(std::env::args_os()));
}
