fn main() {
    std::process::exit(bnn_core::cli::run(std::env::args_os()));
}
