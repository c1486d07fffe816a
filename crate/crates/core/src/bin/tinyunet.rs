fn main() {
    std::process::exit(tinyunet::cli::run(std::env::args_os()));
}
