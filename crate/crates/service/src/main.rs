fn main() {
    std::process::exit(cxrseg_service::cli::run(std::env::args_os()));
}
