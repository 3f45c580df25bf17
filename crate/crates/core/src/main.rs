fn main() {
    std::process::exit(hbunfold::cli::main_with_args(std::env::args_os()));
}
