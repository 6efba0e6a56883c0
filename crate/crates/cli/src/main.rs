fn main() {
    std::process::exit(hishrink_cli::run(std::env::args_os()));
}
