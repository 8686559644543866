fn main() {
    std::process::exit(cbisl_cli::run(std::env::args_os()));
}
