fn main() {
    std::process::exit(storyboard_core::cli::cli_main(std::env::args_os()));
}
