fn main() {
    std::process::exit(equipoise::cli::main_with_args(std::env::args_os()));
}
