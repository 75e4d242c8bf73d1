fn main() {
    std::process::exit(cpool_cli::run(std::env::args_os()));
}
