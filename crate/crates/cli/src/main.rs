fn main() {
    std::process::exit(ftlab_cli::run(std::env::args_os()));
}
