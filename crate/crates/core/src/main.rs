fn main() {
    std::process::exit(comforge::cli::run(std::env::args_os()));
}
