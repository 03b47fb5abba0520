fn main() {
    std::process::exit(latentlab_cli::run(std::env::args_os()));
}
