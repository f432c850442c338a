fn main() {
    std::process::exit(newton_cnn::cli::main_with(std::env::args_os()));
}
