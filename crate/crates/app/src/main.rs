fn main() {
    std::process::exit(lqtf_app::cli::run(std::env::args_os()));
}
