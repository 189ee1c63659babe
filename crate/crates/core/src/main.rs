fn main() {
    std::process::exit(frame_core::cli::run(std::env::args_os()));
}
