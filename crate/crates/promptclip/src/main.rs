fn main() {
    std::process::exit(promptclip::cli::run(std::env::args_os()));
}
